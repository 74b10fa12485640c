import numpy as np
import pytest

from dagnat.lattice import ANCHORED, Lattice


def random_lattice(rng, L, V, constraint=ANCHORED, scale=1.0, dtype=np.float64):
    tok = rng.normal(scale=scale, size=(L, V)).astype(dtype)
    trans = rng.normal(scale=scale, size=(L, L)).astype(dtype)
    return Lattice(tok, trans, constraint)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def exact_walk_distribution(lattice, temperature, top_p, max_step=None):
    """Path -> probability for the filtered-softmax walk, by exhaustive expansion."""
    from dagnat.decoding import transition_sampling_probs
    from dagnat.lattice import EOS

    norm = lattice.normalized()
    L = norm.L
    max_step = L if max_step is None else min(max_step, L)
    probs = transition_sampling_probs(norm, temperature, top_p)
    tokens = np.argmax(norm.token_logprobs, axis=1)
    out = {}

    def walk(path, p):
        last = path[-1]
        if tokens[last] == EOS or last == L - 1 or len(path) >= max_step:
            out[tuple(path)] = out.get(tuple(path), 0.0) + p
            return
        for nxt in np.flatnonzero(probs[last] > 0):
            walk(path + [int(nxt)], p * probs[last, nxt])

    walk([0], 1.0)
    return out


def tiny_setup(dtype):
    """Frozen d=8, one-layer model with m=3 sources over an 8-token vocabulary."""
    import torch

    from dagnat.model import ModelConfig, init_params

    cfg = ModelConfig(vocab_size=8, d_model=8, layers=1, heads=2, ffn_dim=16, upsample=4,
                      max_source_len=5, max_decoder_len=12)
    params = init_params(cfg, seed=3, dtype=dtype)
    with torch.no_grad():
        gen = torch.Generator().manual_seed(4)
        for p in params.values():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=dtype))
    sources = [(1, 5, 6, 2), (1, 7, 4, 2)]
    targets = [(1, 6, 5, 2), (1, 7, 2)]
    return cfg, params, sources, targets


def dp_loss_and_grads(params, cfg, sources, targets):
    """Token-averaged DP loss and its parameter gradients via the injected DP gradient."""
    import torch

    from dagnat import autodiff as ad
    from dagnat import dp
    from dagnat.model import forward

    for p in params.values():
        p.grad = None
    lb = forward(params, cfg, sources, targets=targets)
    tok, trans = dp.normalize_batch(lb.token_logits.detach().double().numpy(),
                                    lb.transition_logits.detach().double().numpy(), lb.L_lens)
    n = np.array([len(t) for t in targets])
    y = np.zeros((len(targets), n.max()), dtype=np.int64)
    for i, t in enumerate(targets):
        y[i, :len(t)] = t
    res = dp.batch_marginal(tok, trans, y, n, lb.L_lens, ANCHORED, with_grad=True)
    total = n.sum()
    ad.inject_gradient([lb.token_logits, lb.transition_logits],
                       [torch.as_tensor(-res.grad_token / total, dtype=lb.token_logits.dtype),
                        torch.as_tensor(-res.grad_transition / total, dtype=lb.transition_logits.dtype)])
    grads = {k: p.grad.detach().clone() for k, p in params.items()}
    return float(-res.logZ.sum() / total), grads


def end_to_end_gradient_errors(dtype):
    """Per-parameter relative error of analytic gradients against double-precision central differences."""
    import torch

    cfg, params, sources, targets = tiny_setup(dtype)
    _, grads = dp_loss_and_grads(params, cfg, sources, targets)
    ref = {k: p.detach().double().clone() for k, p in params.items()}
    errors = {}
    h = 1e-6
    for name, base in ref.items():
        fd = torch.zeros_like(base)
        flat = fd.view(-1)
        for i in range(base.numel()):
            for sign in (1, -1):
                probe = {k: v.clone() for k, v in ref.items()}
                probe[name].view(-1)[i] += sign * h
                with torch.no_grad():
                    loss = _loss_only(probe, cfg, sources, targets)
                flat[i] += sign * loss / (2 * h)
        g = grads[name].double()
        # key biases get an exactly zero gradient (softmax shift invariance), so tiny norms are compared absolutely
        scale = max(float(fd.norm()), 1e-4)
        errors[name] = float((g - fd).norm()) / scale
    return errors


def _loss_only(params, cfg, sources, targets):
    from dagnat import dp
    from dagnat.model import forward

    lb = forward(params, cfg, sources, targets=targets)
    tok, trans = dp.normalize_batch(lb.token_logits.double().numpy(), lb.transition_logits.double().numpy(),
                                    lb.L_lens)
    n = np.array([len(t) for t in targets])
    y = np.zeros((len(targets), n.max()), dtype=np.int64)
    for i, t in enumerate(targets):
        y[i, :len(t)] = t
    return float(-dp.batch_marginal(tok, trans, y, n, lb.L_lens, ANCHORED).logZ.sum() / n.sum())


@pytest.fixture(scope="session")
def small_trained(tmp_path_factory):
    """A briefly trained stage-1 model on a small two-modality corpus."""
    from dagnat.data import TaskSpec, gen_corpus
    from dagnat.trainer import TrainConfig, train

    train_c, valid, test, vocab = gen_corpus(TaskSpec(train_size=1000, valid_size=50, test_size=50))
    cfg = TrainConfig(d_model=32, ffn_dim=64, stage1_steps=300, stage2_epochs=0, max_tokens=512,
                      eval_interval=300, eval_sample_count=4)
    workdir = tmp_path_factory.mktemp("small")
    result = train(cfg, train_c, valid, vocab, workdir)
    return {"result": result, "train": train_c, "valid": valid, "test": test, "vocab": vocab, "cfg": cfg,
            "workdir": workdir}
