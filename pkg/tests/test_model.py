import math

import numpy as np
import pytest
import torch

from conftest import dp_loss_and_grads, end_to_end_gradient_errors, tiny_setup
from dagnat import dp
from dagnat.errors import CheckpointError, InfeasibleTargetError
from dagnat.model import (AdamHyper, AdamState, GlancingSchedule, ModelConfig, adam_step, average_params,
                          clip_by_global_norm, forward, glancing_plan, init_params, load_checkpoint,
                          params_from_arrays, save_checkpoint)
from dagnat.trainer import _normalized, _pad_targets


def test_shapes():
    cfg = ModelConfig(vocab_size=11, d_model=16, layers=1, heads=2, ffn_dim=32, upsample=4)
    lb = forward(init_params(cfg), cfg, [(1, 5, 2)])
    assert lb.L_lens.tolist() == [12]
    assert lb.token_logits.shape == (1, 12, 11)
    assert lb.transition_logits.shape == (1, 12, 12)
    cfg8 = ModelConfig(vocab_size=11, d_model=16, layers=1, heads=2, ffn_dim=32, upsample=8)
    assert forward(init_params(cfg8), cfg8, [(1, 5, 6, 7, 2)]).L_lens.tolist() == [40]
    assert cfg8.decoder_length(20) == cfg8.max_decoder_len


def test_ragged_batch_masks_padding():
    cfg = ModelConfig(vocab_size=11, d_model=16, layers=1, heads=2, ffn_dim=32)
    params = init_params(cfg)
    lb = forward(params, cfg, [(1, 5, 2), (1, 5, 6, 7, 2)])
    assert lb.L_lens.tolist() == [12, 20]
    single = forward(params, cfg, [(1, 5, 2)])
    torch.testing.assert_close(lb.token_logits[0, :12], single.token_logits[0], atol=1e-5, rtol=1e-5)
    lat = lb.lattice(0)
    assert lat.L == 12 and lat.V == 11


def test_zero_transition_projections_give_uniform_rows():
    cfg = ModelConfig(vocab_size=9, d_model=8, layers=1, heads=2, ffn_dim=16)
    params = init_params(cfg)
    with torch.no_grad():
        params["head.trans_q"].zero_()
        params["head.trans_k"].zero_()
    lat = forward(params, cfg, [(1, 5, 6, 2)]).lattice(0)
    probs = np.exp(lat.normalized().transition_logprobs)
    for i in range(lat.L - 1):
        live = probs[i, i + 1:]
        np.testing.assert_allclose(live, 1.0 / len(live), atol=1e-6)


def test_forward_rejects_infeasible_inputs():
    cfg = ModelConfig(vocab_size=9, d_model=8, layers=1, heads=2, ffn_dim=16, upsample=2, max_source_len=6)
    params = init_params(cfg)
    with pytest.raises(InfeasibleTargetError):
        forward(params, cfg, [(1, 5, 2)], targets=[(1, 5, 6, 7, 8, 6, 2)])
    with pytest.raises(InfeasibleTargetError):
        forward(params, cfg, [(1,) + (5,) * 6 + (2,)])
    with pytest.raises(InfeasibleTargetError):
        forward(params, cfg, [()])


def test_glancing_schedule():
    s = GlancingSchedule(0.5, 0.1, 100)
    assert s.ratio(0) == 0.5
    assert s.ratio(100) == pytest.approx(0.1)
    assert s.ratio(1000) == pytest.approx(0.1)
    assert s.ratio(50) == pytest.approx(0.3)


def test_glancing_plan_invariant():
    rng = np.random.default_rng(0)
    path = [0, 2, 3, 7, 9, 11]
    target = [1, 8, 9, 10, 11, 2]
    for r in np.linspace(0, 1, 11):
        plan = glancing_plan(path, target, 0, GlancingSchedule(), rng, ratio=r)
        assert len(plan.positions) == round(r * len(target))
        assert set(plan.positions.tolist()) <= set(path)
        for pos, tok in zip(plan.positions, plan.tokens):
            assert target[path.index(pos)] == tok


def test_zero_ratio_glancing_is_identity():
    cfg, params, sources, targets = tiny_setup(torch.float32)
    plans = [glancing_plan([0, 1, 15], targets[0], 0, GlancingSchedule(), np.random.default_rng(0), ratio=0.0),
             None]
    a = forward(params, cfg, sources)
    b = forward(params, cfg, sources, glancing=plans)
    assert torch.equal(a.token_logits, b.token_logits)
    assert torch.equal(a.transition_logits, b.transition_logits)


def test_glancing_consistency(small_trained):
    res = small_trained["result"]
    params, cfg = res.params, res.model_config
    examples = small_trained["train"][:128]
    src = [e.source for e in examples]
    tgt = [e.sampled_target for e in examples]
    y, n = _pad_targets(tgt)
    with torch.no_grad():
        lb = forward(params, cfg, src, targets=tgt)
        tok, trans = _normalized(lb)
        before = -dp.batch_marginal(tok, trans, y, n, lb.L_lens).logZ / n
        paths, _ = dp.batch_viterbi(tok, trans, y, n, lb.L_lens)
        rng = np.random.default_rng(0)
        plans = [glancing_plan(paths[b, : n[b]], tgt[b], 0, GlancingSchedule(), rng, ratio=1.0)
                 for b in range(len(tgt))]
        lb = forward(params, cfg, src, glancing=plans, targets=tgt)
        tok, trans = _normalized(lb)
        after = -dp.batch_marginal(tok, trans, y, n, lb.L_lens).logZ / n
    assert after.mean() <= before.mean()


def test_end_to_end_gradients_single_precision():
    errors = end_to_end_gradient_errors(torch.float32)
    assert max(errors.values()) <= 1e-2, errors


def test_end_to_end_gradients_double_precision():
    errors = end_to_end_gradient_errors(torch.float64)
    assert max(errors.values()) <= 1e-4, errors


def test_determinism():
    cfg, params, sources, targets = tiny_setup(torch.float32)
    a = dp_loss_and_grads(params, cfg, sources, targets)
    cfg, params, sources, targets = tiny_setup(torch.float32)
    b = dp_loss_and_grads(params, cfg, sources, targets)
    assert a[0] == b[0]
    assert all(torch.equal(a[1][k], b[1][k]) for k in a[1])


def scalar_param(value):
    return {"w": torch.tensor([value], dtype=torch.float64)}


def test_adam_scalar_matches_hand_computation():
    hyper = AdamHyper(lr=0.1, beta1=0.9, beta2=0.98, eps=1e-8, clip_norm=0.0)
    params = scalar_param(1.0)
    state = AdamState()
    w = 1.0
    m = v = 0.0
    for t, g in enumerate([0.5, -0.2, 0.3], start=1):
        assert adam_step(params, {"w": torch.tensor([g], dtype=torch.float64)}, state, hyper)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        w -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.98**t)) + 1e-8)
        assert float(params["w"]) == pytest.approx(w, abs=1e-15)
    assert state.step == 3


def test_adam_zero_gradient_keeps_params():
    params = scalar_param(2.0)
    state = AdamState()
    adam_step(params, {"w": torch.zeros(1, dtype=torch.float64)}, state, AdamHyper())
    assert float(params["w"]) == 2.0 and state.step == 1


def test_clipping_halves_gradients():
    grads = {"a": torch.tensor([1.2, 0.0]), "b": torch.tensor([1.6])}
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(2.0)
    torch.testing.assert_close(clipped["a"], grads["a"] / 2)
    torch.testing.assert_close(clipped["b"], grads["b"] / 2)


def test_non_finite_gradient_skips_update(caplog):
    params = scalar_param(1.0)
    state = AdamState()
    assert not adam_step(params, {"w": torch.tensor([float("nan")], dtype=torch.float64)}, state, AdamHyper())
    assert float(params["w"]) == 1.0 and state.step == 0
    assert "skipped" in caplog.text
    with pytest.raises(ValueError):
        adam_step(params, {"w": torch.zeros(2, dtype=torch.float64)}, state, AdamHyper())


def test_checkpoint_round_trip(tmp_path):
    cfg, params, sources, _ = tiny_setup(torch.float32)
    path = tmp_path / "m.cdat"
    meta = {"note": "α = 0.5", "empty": ""}
    save_checkpoint(path, params, {**cfg.to_strings(), **meta})
    got_meta, arrays = load_checkpoint(path)
    assert got_meta["note"] == meta["note"] and got_meta["empty"] == ""
    assert ModelConfig.from_strings(got_meta) == cfg
    for name, p in params.items():
        assert arrays[name].tobytes() == p.detach().numpy().tobytes()
    restored = params_from_arrays(arrays, cfg)
    a, b = forward(params, cfg, sources), forward(restored, cfg, sources)
    assert torch.equal(a.token_logits, b.token_logits)
    assert torch.equal(a.transition_logits, b.transition_logits)
    save_checkpoint(tmp_path / "again.cdat", restored, {**cfg.to_strings(), **meta})
    assert (tmp_path / "again.cdat").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.cdat"
    save_checkpoint(path, {"ab": np.array([[1.5, -2.0]], dtype=np.float32)}, {"k": "v"})
    raw = path.read_bytes()
    expected = (b"CDAT" + (1).to_bytes(4, "little") + (3).to_bytes(4, "little") + b"k=v"
                + (2).to_bytes(2, "little") + b"ab" + bytes([2]) + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + np.array([1.5, -2.0], dtype="<f4").tobytes())
    assert raw == expected


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.cdat"
    bad.write_bytes(b"NOPE")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    cfg, params, _, _ = tiny_setup(torch.float32)
    arrays = {k: v.detach().numpy() for k, v in params.items()}
    del arrays["head.vocab"]
    with pytest.raises(CheckpointError):
        params_from_arrays(arrays, cfg)
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "c.cdat", {}, {"a=b": "1"})


def test_average_of_identical_checkpoints_is_identity():
    cfg, params, _, _ = tiny_setup(torch.float32)
    avg = average_params([params, params, params])
    for k in params:
        assert torch.equal(avg[k], params[k].detach())
    half = average_params([{"w": torch.zeros(2)}, {"w": torch.ones(2)}])
    torch.testing.assert_close(half["w"], torch.full((2,), 0.5))
