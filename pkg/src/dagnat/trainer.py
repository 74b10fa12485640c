"""Two-stage training (MLE with glancing, then MLE plus sample-based terms), evaluation and persistence.

Layout of a run directory::

    config.txt        resolved configuration
    metrics.jsonl     one MetricsEvent per evaluation, in step order
    state.cdat        latest resumable state (parameters and Adam moments)
    ckpt/             top-k validation checkpoints of the current stage
    stage1.cdat       stage-1 result (top-k average), the stage-2 starting point
    final.cdat        stage-2 result (top-k average)
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import dp
from .config import render_config
from .data import Corpus, iter_epochs
from .decoding import BETA_GRID, DecodeConfig, batch_sample, dedup, lookahead_decode, rescore
from .errors import CheckpointError, ConfigError, VocabError
from .lattice import ANCHORED, CONSTRAINTS, Hypothesis, Lattice, Vocabulary
from .metrics import EvalReport, corpus_bleu, modality_metrics, ncm, oracle_bleu
from .model import (AdamHyper, AdamState, GlancingSchedule, LatticeBatch, ModelConfig, Params,
                    adam_step, average_params, forward, glancing_plan, init_params, load_checkpoint,
                    params_from_arrays, save_checkpoint)
from .objectives import ObjectiveConfig, combined_step_loss, strip_special

logger = logging.getLogger(__name__)

OBJECTIVES = ("mle", "contrastive", "reward")


@dataclass
class TrainConfig:
    # model
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 128
    upsample: int = 4
    max_source_len: int = 64
    max_decoder_len: int = 96
    # schedule
    stage1_steps: int = 3000
    stage2_epochs: int = 5
    stage2_max_steps: int = 0  # 0: no cap beyond the epoch count
    lr_stage1: float = 3e-3
    lr_stage2: float = 1e-3
    warmup_steps: int = 200
    max_tokens: int = 4096
    clip_norm: float = 1.0
    grad_accum: int = 1
    # objective
    epsilon_lb: float = 0.001
    sample_count: int = 128
    keep_ratio: float = 0.25
    tau_train: float = 0.1
    tau_infer: float = 0.05
    top_p: float = 0.5
    beta_grid: tuple[float, ...] = BETA_GRID
    alpha_mode: str = "from-validation"
    alpha: float = math.inf
    cl_weight: float = 1.0
    rl_weight: float = 0.0
    constraint: str = ANCHORED
    # glancing
    glancing: bool = True
    glance_start: float = 0.5
    glance_end: float = 0.1
    glance_span: int = 0  # 0: the stage-1 step count
    # bookkeeping
    seed: int = 0
    eval_interval: int = 200
    eval_sample_count: int = 16
    keep_checkpoints: int = 5
    threads: int = 1

    def __post_init__(self):
        positive = ["d_model", "layers", "heads", "ffn_dim", "upsample", "max_source_len", "max_decoder_len",
                    "max_tokens", "grad_accum", "sample_count", "eval_interval", "eval_sample_count",
                    "keep_checkpoints", "threads"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("stage1_steps", "stage2_epochs", "stage2_max_steps", "warmup_steps", "glance_span"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("lr_stage1", "lr_stage2", "tau_train", "tau_infer", "epsilon_lb", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0 < self.keep_ratio <= 1:
            raise ConfigError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if not 0 < self.top_p <= 1:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.alpha_mode not in ("fixed", "from-validation"):
            raise ConfigError(f"alpha_mode must be 'fixed' or 'from-validation', got {self.alpha_mode!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.cl_weight < 0 or self.rl_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"constraint must be one of {CONSTRAINTS}")
        if not self.beta_grid or any(not 0 <= b <= 1 for b in self.beta_grid):
            raise ConfigError("beta_grid entries must lie in [0, 1]")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, layers=self.layers, heads=self.heads,
                           ffn_dim=self.ffn_dim, upsample=self.upsample, max_source_len=self.max_source_len,
                           max_decoder_len=self.max_decoder_len)

    def objective(self, alpha: float) -> ObjectiveConfig:
        return ObjectiveConfig(epsilon_lb=self.epsilon_lb, sample_count=self.sample_count,
                               keep_ratio=self.keep_ratio, temperature=self.tau_train, top_p=self.top_p,
                               alpha=alpha, cl_weight=self.cl_weight, rl_weight=self.rl_weight,
                               constraint=self.constraint)

    def with_objective(self, name: str) -> "TrainConfig":
        if name == "mle":
            return dataclasses.replace(self, cl_weight=0.0, rl_weight=0.0)
        if name == "contrastive":
            return dataclasses.replace(self, cl_weight=self.cl_weight or 1.0, rl_weight=0.0)
        if name == "reward":
            return dataclasses.replace(self, cl_weight=0.0, rl_weight=self.rl_weight or 1.0)
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got {name!r}")


@dataclass
class MetricsEvent:
    step: int
    stage: int
    dp_loss: float  # validation, per-token NLL of the sampled references
    cl_loss: float  # training mean since the previous event
    rl_loss: float
    valid_bleu: float
    ncm: float
    oracle_bleu: float
    exact_valid_match_rate: float
    wall_time: float
    train_dp_loss: float = 0.0
    gated_fraction: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def floor_alpha(nll: float) -> float:
    """Round a validation NLL down to one decimal (two significant digits below 1)."""
    if not nll > 0:
        raise ConfigError(f"cannot derive alpha from validation NLL {nll}")
    digits = max(1, 1 - math.floor(math.log10(nll)))
    q = 10**digits
    return math.floor(nll * q + 1e-9) / q


# ---------------------------------------------------------------- evaluation


def _pad_targets(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    n = np.array([len(t) for t in targets], dtype=np.int64)
    out = np.zeros((len(targets), int(n.max())), dtype=np.int64)
    for i, t in enumerate(targets):
        out[i, : len(t)] = t
    return out, n


def _normalized(lb: LatticeBatch) -> tuple[np.ndarray, np.ndarray]:
    tok = lb.token_logits.detach().double().numpy()
    trans = lb.transition_logits.detach().double().numpy()
    return dp.normalize_batch(tok, trans, lb.L_lens)


def _chunks(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def target_nlls(params: Params, mcfg: ModelConfig, sources: Sequence[Sequence[int]],
                targets: Sequence[Sequence[int]], constraint: str = ANCHORED, chunk: int = 128) -> np.ndarray:
    """Negative log marginal likelihood of each ``targets[i]`` given ``sources[i]``."""
    out = []
    with torch.no_grad():
        for idx in _chunks(list(range(len(sources))), chunk):
            src = [sources[i] for i in idx]
            tgt = [targets[i] for i in idx]
            lb = forward(params, mcfg, src, targets=tgt)
            tok, trans = _normalized(lb)
            y, n = _pad_targets(tgt)
            out.append(-dp.batch_marginal(tok, trans, y, n, lb.L_lens, constraint).logZ)
    return np.concatenate(out) if out else np.zeros(0)


def lattices_for(params: Params, mcfg: ModelConfig, sources: Sequence[Sequence[int]],
                 constraint: str = ANCHORED, chunk: int = 128):
    with torch.no_grad():
        for idx in _chunks(list(range(len(sources))), chunk):
            lb = forward(params, mcfg, [sources[i] for i in idx])
            for b in range(len(idx)):
                L = int(lb.L_lens[b])
                yield Lattice(lb.token_logits[b, :L].double().numpy(),
                                 lb.transition_logits[b, :L, :L].double().numpy(), constraint)


def evaluate(params: Params, mcfg: ModelConfig, corpus: Corpus, decode: DecodeConfig,
             constraint: str = ANCHORED, vocab: Optional[Vocabulary] = None,
             expected_vocab: Optional[Vocabulary] = None) -> EvalReport:
    """Lookahead outputs for BLEU and exact matches, samples for oracle BLEU, DP NLLs for NCM."""
    if expected_vocab is not None and vocab is not None and vocab != expected_vocab:
        raise VocabError("checkpoint vocabulary differs from the corpus vocabulary")
    if not corpus:
        raise ConfigError("cannot evaluate an empty corpus")
    sources = [ex.source for ex in corpus]
    outputs, samples = [], []
    rng = np.random.default_rng(decode.seed)
    for lat in lattices_for(params, mcfg, sources, constraint):
        outputs.append(strip_special(lookahead_decode(lat, decode.max_step).tokens))
        samples.append([strip_special(h.tokens) for h in batch_sample(lat, decode, rng)])
    refs = [strip_special(ex.sampled_target) for ex in corpus]
    valid = [[strip_special(t) for t in ex.valid_targets] for ex in corpus]
    match, multi = modality_metrics(outputs, valid)
    pair_src = [ex.source for ex in corpus for _ in ex.valid_targets]
    pair_tgt = [t for ex in corpus for t in ex.valid_targets]
    nlls = target_nlls(params, mcfg, pair_src, pair_tgt, constraint)
    return EvalReport(corpus_bleu=corpus_bleu(outputs, refs),
                      ncm=ncm(nlls.tolist(), [len(t) for t in pair_tgt]),
                      oracle_bleu=oracle_bleu(samples, refs),
                      exact_valid_match_rate=match,
                      multi_ref_bleu=multi)


def validation_dp_loss(params: Params, mcfg: ModelConfig, corpus: Corpus, constraint: str = ANCHORED) -> float:
    """Mean over examples of the per-token NLL of the sampled reference."""
    tgt = [ex.sampled_target for ex in corpus]
    nll = target_nlls(params, mcfg, [ex.source for ex in corpus], tgt, constraint)
    return float(np.mean(nll / np.array([len(t) for t in tgt])))


def sample_outputs(lattice: dp.Lattice, decode: DecodeConfig, rng: np.random.Generator) -> list[Hypothesis]:
    """Distinct samples ranked by the beta-rescored score, best first."""
    return rescore(dedup(batch_sample(lattice, decode, rng), decode.beta), decode.beta)


def select_beta(params: Params, mcfg: ModelConfig, corpus: Corpus, decode: DecodeConfig,
                grid: Sequence[float] = BETA_GRID, constraint: str = ANCHORED) -> float:
    """The grid value whose top-rescored sample gives the best multi-reference BLEU."""
    lats = list(lattices_for(params, mcfg, [ex.source for ex in corpus], constraint))
    valid = [[strip_special(t) for t in ex.valid_targets] for ex in corpus]
    scores = []
    for beta in grid:
        cfg = dataclasses.replace(decode, beta=beta)
        rng = np.random.default_rng(decode.seed)
        outs = [strip_special(sample_outputs(lat, cfg, rng)[0].tokens) for lat in lats]
        scores.append(modality_metrics(outs, valid)[1])
    return grid[int(np.argmax(scores))]


# ---------------------------------------------------------------- persistence


def _meta(cfg: TrainConfig, mcfg: ModelConfig, vocab: Vocabulary, **extra) -> dict[str, str]:
    meta = mcfg.to_strings()
    meta["vocab"] = " ".join(vocab.tokens)
    meta["constraint"] = cfg.constraint
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def save_model(path, params: Params, cfg: TrainConfig, mcfg: ModelConfig, vocab: Vocabulary, **extra) -> None:
    save_checkpoint(path, params, _meta(cfg, mcfg, vocab, **extra))


@dataclass
class LoadedModel:
    params: Params
    config: ModelConfig
    vocab: Vocabulary
    meta: dict[str, str]

    @property
    def constraint(self) -> str:
        return self.meta.get("constraint", ANCHORED)


def load_model(path) -> LoadedModel:
    meta, arrays = load_checkpoint(path)
    if "vocab" not in meta:
        raise CheckpointError(f"{path}: no vocabulary in the config block")
    tokens = meta["vocab"].split(" ")
    vocab = Vocabulary(tokens[4:])
    if vocab.tokens != tokens:
        raise CheckpointError(f"{path}: malformed vocabulary")
    mcfg = ModelConfig.from_strings(meta)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    return LoadedModel(params_from_arrays(model_arrays, mcfg), mcfg, vocab, meta)


# ---------------------------------------------------------------- training


@dataclass
class RunState:
    stage: int
    step: int
    params: Params
    adam: AdamState
    alpha: float
    best: list[tuple[float, int]] = field(default_factory=list)  # (valid score, step)
    window: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class TrainResult:
    params: Params
    model_config: ModelConfig
    alpha: float
    events: list[MetricsEvent]
    stage1_path: FsPath
    final_path: Optional[FsPath]
    beta: float = 0.5


class Trainer:
    def __init__(self, cfg: TrainConfig, train: Corpus, valid: Corpus, vocab: Vocabulary, workdir):
        if not train or not valid:
            raise ConfigError("training needs non-empty train and validation corpora")
        self.cfg = cfg
        self.train_corpus = train
        self.valid = valid
        self.vocab = vocab
        self.workdir = FsPath(workdir)
        self.mcfg = cfg.model_config(len(vocab))
        self.ckpt_dir = self.workdir / "ckpt"
        self.metrics_path = self.workdir / "metrics.jsonl"
        self.state_path = self.workdir / "state.cdat"
        self.stage1_path = self.workdir / "stage1.cdat"
        self.final_path = self.workdir / "final.cdat"
        self.glance = GlancingSchedule(cfg.glance_start, cfg.glance_end, cfg.glance_span or cfg.stage1_steps)
        self.t0 = time.perf_counter()

    # -- bookkeeping

    def _setup(self):
        torch.set_num_threads(self.cfg.threads)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(exist_ok=True)
        (self.workdir / "config.txt").write_text(render_config(self.cfg), encoding="utf-8")

    def _eval_decode(self) -> DecodeConfig:
        return DecodeConfig(temperature=self.cfg.tau_infer, top_p=self.cfg.top_p,
                            sample_count=self.cfg.eval_sample_count, seed=self.cfg.seed)

    def _emit(self, state: RunState, report: EvalReport, valid_dp: float) -> MetricsEvent:
        w = state.window
        mean = lambda k: float(np.mean(w[k])) if w.get(k) else 0.0  # noqa: E731
        ev = MetricsEvent(step=state.step, stage=state.stage, dp_loss=valid_dp, cl_loss=mean("cl"),
                          rl_loss=mean("rl"), valid_bleu=report.multi_ref_bleu, ncm=report.ncm,
                          oracle_bleu=report.oracle_bleu, exact_valid_match_rate=report.exact_valid_match_rate,
                          wall_time=time.perf_counter() - self.t0, train_dp_loss=mean("dp"),
                          gated_fraction=mean("gated"))
        state.window = {}
        with open(self.metrics_path, "a", encoding="utf-8") as fh:
            fh.write(ev.to_json() + "\n")
        return ev

    def _evaluate_now(self, state: RunState) -> MetricsEvent:
        report = evaluate(state.params, self.mcfg, self.valid, self._eval_decode(), self.cfg.constraint)
        valid_dp = validation_dp_loss(state.params, self.mcfg, self.valid, self.cfg.constraint)
        ev = self._emit(state, report, valid_dp)
        self._keep_best(state, ev.valid_bleu)
        self._save_state(state)
        return ev

    def _ckpt_path(self, stage: int, step: int) -> FsPath:
        return self.ckpt_dir / f"stage{stage}-{step:07d}.cdat"

    def _keep_best(self, state: RunState, score: float) -> None:
        entry = (score, state.step)
        ranked = sorted(state.best + [entry], key=lambda e: (-e[0], e[1]))
        keep = ranked[: self.cfg.keep_checkpoints]
        if entry in keep:
            save_model(self._ckpt_path(state.stage, state.step), state.params, self.cfg, self.mcfg, self.vocab)
        for _, step in set(state.best + [entry]) - set(keep):
            self._ckpt_path(state.stage, step).unlink(missing_ok=True)
        state.best = sorted(keep, key=lambda e: e[1])

    def _average_best(self, state: RunState) -> Params:
        snaps = [load_model(self._ckpt_path(state.stage, step)).params for _, step in state.best]
        return average_params(snaps)

    def _save_state(self, state: RunState) -> None:
        tensors = dict(state.params)
        for name, m in state.adam.m.items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = state.adam.v[name]
        best = ",".join(f"{s!r}:{k}" for s, k in state.best)
        save_model(self.state_path, tensors, self.cfg, self.mcfg, self.vocab, stage=state.stage, step=state.step,
                   adam_step=state.adam.step, alpha=repr(state.alpha), best=best)

    def _load_state(self) -> RunState:
        meta, arrays = load_checkpoint(self.state_path)
        params = params_from_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")}, self.mcfg)
        adam = AdamState(step=int(meta["adam_step"]))
        for name in params:
            if f"adam.m.{name}" in arrays:
                adam.m[name] = torch.tensor(arrays[f"adam.m.{name}"])
                adam.v[name] = torch.tensor(arrays[f"adam.v.{name}"])
        best = []
        for item in filter(None, meta["best"].split(",")):
            s, k = item.rsplit(":", 1)
            best.append((float(s), int(k)))
        return RunState(stage=int(meta["stage"]), step=int(meta["step"]), params=params, adam=adam,
                        alpha=float(meta["alpha"]), best=best)

    def _truncate_metrics(self, step: int) -> None:
        if not self.metrics_path.exists():
            return
        kept = [line for line in self.metrics_path.read_text(encoding="utf-8").splitlines()
                if json.loads(line)["step"] <= step]
        self.metrics_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")

    def read_events(self) -> list[MetricsEvent]:
        if not self.metrics_path.exists():
            return []
        return [MetricsEvent(**json.loads(line)) for line in self.metrics_path.read_text(encoding="utf-8").splitlines()]

    # -- steps

    def _lr(self, state: RunState) -> float:
        if state.stage == 1:
            warm = self.cfg.warmup_steps
            return self.cfg.lr_stage1 * (min(1.0, state.step / warm) if warm else 1.0)
        return self.cfg.lr_stage2

    def _collect_grads(self, params: Params) -> dict[str, torch.Tensor]:
        grads = {}
        for name, p in params.items():
            grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            p.grad = None
        return grads

    def _stage1_micro(self, state: RunState, sources, targets, scale: float) -> None:
        """Glanced MLE step: per-token NLL summed over the batch and divided by its token count."""
        plans = None
        y, n = _pad_targets(targets)
        if self.cfg.glancing:
            with torch.no_grad():
                lb0 = forward(state.params, self.mcfg, sources, targets=targets)
            tok, trans = _normalized(lb0)
            paths, _ = dp.batch_viterbi(tok, trans, y, n, lb0.L_lens, self.cfg.constraint)
            rng = np.random.default_rng([self.cfg.seed, 1, state.step])
            plans = [glancing_plan(paths[b, : n[b]], targets[b], state.step, self.glance, rng)
                     for b in range(len(targets))]
        lb = forward(state.params, self.mcfg, sources, glancing=plans, targets=targets)
        tok, trans = _normalized(lb)
        res = dp.batch_marginal(tok, trans, y, n, lb.L_lens, self.cfg.constraint, with_grad=True)
        total = n.sum()
        g_tok = -res.grad_token / total * scale
        g_trans = -res.grad_transition / total * scale
        ad.inject_gradient([lb.token_logits, lb.transition_logits],
                           [torch.as_tensor(g_tok, dtype=lb.token_logits.dtype),
                            torch.as_tensor(g_trans, dtype=lb.transition_logits.dtype)])
        state.window.setdefault("dp", []).append(float(np.mean(-res.logZ / n)))

    def _stage2_micro(self, state: RunState, sources, targets, scale: float) -> None:
        """Batch objective ``sum NLL / sum n + mean_b(cl_w * cl_b + rl_w * rl_b)``; gated rows add only NLL."""
        y, n = _pad_targets(targets)
        lb = forward(state.params, self.mcfg, sources, targets=targets)
        tok, trans = _normalized(lb)
        res = dp.batch_marginal(tok, trans, y, n, lb.L_lens, self.cfg.constraint, with_grad=True)
        B = len(targets)
        total = n.sum()
        g_tok = -res.grad_token / total
        g_trans = -res.grad_transition / total
        objective = self.cfg.objective(state.alpha)
        cls, rls, gated = [], [], []
        if objective.cl_weight or objective.rl_weight:
            tok_logits = lb.token_logits.detach().double().numpy()
            trans_logits = lb.transition_logits.detach().double().numpy()
            for b in range(B):
                L = int(lb.L_lens[b])
                lat = Lattice(tok_logits[b, :L], trans_logits[b, :L, :L], self.cfg.constraint)
                rng = np.random.default_rng([self.cfg.seed, 2, state.step, b])
                zero = (np.zeros((L, lat.V)), np.zeros((L, L)))
                step = combined_step_loss(lat, targets[b], objective, rng, dp_result=(res.logZ[b], *zero))
                g_tok[b, :L] += step.grad_token / B
                g_trans[b, :L, :L] += step.grad_transition / B
                cls.append(step.report.cl_loss)
                rls.append(step.report.rl_loss)
                gated.append(float(step.report.gated))
        ad.inject_gradient([lb.token_logits, lb.transition_logits],
                           [torch.as_tensor(g_tok * scale, dtype=lb.token_logits.dtype),
                            torch.as_tensor(g_trans * scale, dtype=lb.transition_logits.dtype)])
        w = state.window
        w.setdefault("dp", []).append(float(np.mean(-res.logZ / n)))
        w.setdefault("cl", []).append(float(np.mean(cls)) if cls else 0.0)
        w.setdefault("rl", []).append(float(np.mean(rls)) if rls else 0.0)
        w.setdefault("gated", []).append(float(np.mean(gated)) if gated else 0.0)

    def _update(self, state: RunState, batches) -> None:
        scale = 1.0 / len(batches)
        micro = self._stage1_micro if state.stage == 1 else self._stage2_micro
        for batch in batches:
            micro(state, batch.sources, batch.targets, scale)
        grads = self._collect_grads(state.params)
        adam_step(state.params, grads, state.adam, AdamHyper(lr=self._lr(state), clip_norm=self.cfg.clip_norm))

    def _batches(self, stage: int, start_update: int):
        """Yield lists of ``grad_accum`` batches, skipping the first ``start_update`` updates."""
        seed = self.cfg.seed * 7919 + stage
        group, seen = [], 0
        for epoch, batches in iter_epochs(self.train_corpus, self.cfg.max_tokens, seed):
            for batch in batches:
                group.append(batch)
                if len(group) == self.cfg.grad_accum:
                    if seen >= start_update:
                        yield epoch, group
                    seen += 1
                    group = []

    def stage2_updates(self) -> int:
        per_epoch = len(next(iter_epochs(self.train_corpus, self.cfg.max_tokens, 0))[1]) // self.cfg.grad_accum
        total = self.cfg.stage2_epochs * max(per_epoch, 1)
        return min(total, self.cfg.stage2_max_steps) if self.cfg.stage2_max_steps else total

    def _run_stage(self, state: RunState, n_updates: int, first_step: int,
                   stop_after: Optional[int]) -> bool:
        """Advance ``state`` to ``first_step + n_updates``; False if stopped early by ``stop_after``."""
        end = first_step + n_updates
        if state.step >= end:
            return True
        it = self._batches(state.stage, state.step - first_step)
        while state.step < end:
            if stop_after is not None and state.step >= stop_after:
                return False
            _, group = next(it)
            state.step += 1
            self._update(state, group)
            if (state.step - first_step) % self.cfg.eval_interval == 0 or state.step == end:
                self._evaluate_now(state)
        return True

    def _finish_stage(self, state: RunState, path: FsPath, **extra) -> Params:
        params = self._average_best(state)
        save_model(path, params, self.cfg, self.mcfg, self.vocab, alpha=repr(state.alpha), **extra)
        return params

    def _start_stage2(self, stage1_params: Params) -> RunState:
        params = {k: v.detach().clone().requires_grad_(True) for k, v in stage1_params.items()}
        if self.cfg.alpha_mode == "from-validation":
            alpha = floor_alpha(validation_dp_loss(params, self.mcfg, self.valid, self.cfg.constraint))
        else:
            alpha = self.cfg.alpha
        return RunState(stage=2, step=self.cfg.stage1_steps, params=params, adam=AdamState(), alpha=alpha)

    def run(self, resume: bool = False, stop_after: Optional[int] = None,
            stage1_init: Optional[FsPath] = None) -> Optional[TrainResult]:
        """Run both stages (or stage 2 only from ``stage1_init``); None when ``stop_after`` interrupts."""
        self._setup()
        if resume and self.state_path.exists():
            state = self._load_state()
            self._truncate_metrics(state.step)
        else:
            if self.metrics_path.exists():
                self.metrics_path.unlink()
            for old in self.ckpt_dir.glob("*.cdat"):
                old.unlink()
            if stage1_init is not None:
                init = load_model(stage1_init)
                if init.vocab != self.vocab:
                    raise VocabError("stage-1 checkpoint vocabulary differs from the corpus vocabulary")
                if self.stage1_path.resolve() != FsPath(stage1_init).resolve():
                    save_model(self.stage1_path, init.params, self.cfg, self.mcfg, self.vocab)
                state = self._start_stage2(init.params)
            else:
                torch.manual_seed(self.cfg.seed)
                state = RunState(stage=1, step=0, params=init_params(self.mcfg, self.cfg.seed),
                                 adam=AdamState(), alpha=self.cfg.alpha)

        if state.stage == 1:
            if not self._run_stage(state, self.cfg.stage1_steps, 0, stop_after):
                return None
            if self.cfg.stage1_steps == 0:
                save_model(self.stage1_path, state.params, self.cfg, self.mcfg, self.vocab)
                stage1_params = state.params
            else:
                stage1_params = self._finish_stage(state, self.stage1_path)
            state = self._start_stage2(stage1_params)
            self._save_state(state)

        if not self.stage1_path.exists():
            raise ConfigError("stage 2 requires a stage-1 checkpoint")
        n2 = self.stage2_updates()
        if not self._run_stage(state, n2, self.cfg.stage1_steps, stop_after):
            return None
        if n2:
            final = self._finish_stage(state, self.final_path)
        else:
            final = state.params
            save_model(self.final_path, final, self.cfg, self.mcfg, self.vocab, alpha=repr(state.alpha))
        return TrainResult(params=final, model_config=self.mcfg, alpha=state.alpha, events=self.read_events(),
                           stage1_path=self.stage1_path, final_path=self.final_path)


def train(cfg: TrainConfig, train_corpus: Corpus, valid: Corpus, vocab: Vocabulary, workdir,
          resume: bool = False, stop_after: Optional[int] = None,
          stage1_init=None) -> Optional[TrainResult]:
    return Trainer(cfg, train_corpus, valid, vocab, workdir).run(resume, stop_after, stage1_init)
