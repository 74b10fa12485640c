"""Training losses: DP likelihood, pairwise ranking hinge over model samples, and REINFORCE.

Losses that act on model samples return gradients with respect to the raw
lattice logits (token and transition) of the example they were sampled from;
the trainer injects those into the network's backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dp
from .decoding import DecodeConfig, batch_sample, dedup
from .errors import DegenerateBaselineError, InfeasibleTargetError, OrderingError
from .lattice import ANCHORED, BOS, EOS, PAD, Hypothesis, Lattice
from .metrics import sentence_bleu


@dataclass
class RankedSampleSet:
    hypotheses: list[Hypothesis]  # ascending by reward

    @property
    def kept_count(self) -> int:
        return len(self.hypotheses)

    def __len__(self) -> int:
        return len(self.hypotheses)


@dataclass
class LossReport:
    dp_loss: float
    cl_loss: float = 0.0
    rl_loss: float = 0.0
    gated: bool = False
    pairs_evaluated: int = 0
    total: float = 0.0


@dataclass
class ObjectiveConfig:
    epsilon_lb: float = 0.001
    sample_count: int = 128
    keep_ratio: float = 0.25
    temperature: float = 0.1
    top_p: float = 0.5
    beta: float = 0.5
    alpha: float = math.inf
    cl_weight: float = 1.0
    rl_weight: float = 0.0
    constraint: str = ANCHORED


def strip_special(tokens: Sequence[int]) -> tuple[int, ...]:
    return tuple(t for t in tokens if t not in (PAD, BOS, EOS))


def mle_loss(lattice: Lattice, target: Sequence[int], constraint: Optional[str] = None) -> float:
    logZ, _ = dp.dp_marginal_logprob(lattice, target, constraint)
    return -logZ


def reward_fn(hyp_tokens: Sequence[int], ref_tokens: Sequence[int]) -> float:
    if len(hyp_tokens) == 0:
        return 0.0
    return sentence_bleu(tuple(hyp_tokens), tuple(ref_tokens))


def reward_distribution_identity_check(r1: float, r2: float) -> float:
    """log p^R(y1) / p^R(y2) for p^R proportional to exp(R); the normalizer cancels."""
    return r1 - r2


def _feasible(h: Hypothesis, L: int, constraint: str) -> bool:
    n = len(h.tokens)
    return n <= L and not (constraint == ANCHORED and n < 2)


def hypothesis_marginals(lattice: Lattice, hyps: Sequence[Hypothesis], constraint: Optional[str] = None,
                         with_grad: bool = False) -> dp.BatchDP:
    """Batched DP of every hypothesis' token sequence on one shared lattice."""
    constraint = constraint or lattice.constraint
    if constraint != lattice.constraint:
        lattice = lattice.with_constraint(constraint)
    norm = lattice.normalized()
    n_lens = np.array([len(h.tokens) for h in hyps])
    targets = np.zeros((len(hyps), n_lens.max()), dtype=np.int64)
    for k, h in enumerate(hyps):
        targets[k, : n_lens[k]] = h.tokens
    tok = np.broadcast_to(norm.token_logprobs, (len(hyps),) + norm.token_logprobs.shape)
    return dp.batch_marginal(tok, norm.transition_logprobs, targets, n_lens,
                             np.full(len(hyps), lattice.L), constraint, with_grad)


def fill_norm_marginals(lattice: Lattice, hyps: Sequence[Hypothesis], constraint: Optional[str] = None) -> None:
    if not hyps:
        return
    res = hypothesis_marginals(lattice, hyps, constraint)
    for h, z in zip(hyps, res.logZ):
        h.norm_marginal_logprob = float(z) / len(h.tokens)


def rank_samples(lattice: Lattice, hyps: Sequence[Hypothesis], reference: Sequence[int],
                 constraint: Optional[str] = None) -> RankedSampleSet:
    """Reward distinct hypotheses against ``reference`` and sort ascending by reward.

    Hypotheses sharing an exact reward collapse to the one with the larger
    length-normalized marginal log-likelihood, so rewards end strictly increasing.
    """
    constraint = constraint or lattice.constraint
    ref = strip_special(reference)
    pool = [h for h in dedup(hyps) if _feasible(h, lattice.L, constraint)]
    for h in pool:
        h.reward = reward_fn(strip_special(h.tokens), ref)
    groups: dict[float, list[Hypothesis]] = {}
    for h in pool:
        groups.setdefault(h.reward, []).append(h)
    tied = [h for g in groups.values() if len(g) > 1 for h in g]
    fill_norm_marginals(lattice, tied, constraint)
    survivors = [g[0] if len(g) == 1 else max(g, key=lambda h: h.norm_marginal_logprob)
                 for g in groups.values()]
    survivors.sort(key=lambda h: h.reward)
    return RankedSampleSet(survivors)


def filter_hypotheses(samples: RankedSampleSet, keep_ratio: float) -> RankedSampleSet:
    """Keep the ``ceil(keep_ratio * K)`` highest-reward distinct hypotheses, order preserved."""
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    seen, distinct = set(), []
    for h in samples.hypotheses:
        if h.tokens not in seen:
            seen.add(h.tokens)
            distinct.append(h)
    keep = math.ceil(keep_ratio * len(distinct))
    return RankedSampleSet(distinct[len(distinct) - keep:] if keep else [])


def sample_gate(dp_loss: float, alpha: float) -> bool:
    """True when the example is too hard to train on its own samples (strictly above alpha)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return dp_loss > alpha


def _check_order(samples: RankedSampleSet) -> np.ndarray:
    rewards = [h.reward for h in samples.hypotheses]
    if any(r is None for r in rewards):
        raise OrderingError("hypotheses carry no reward")
    if any(b <= a for a, b in zip(rewards, rewards[1:])):
        raise OrderingError("hypotheses must be strictly ascending by reward")
    s = [h.norm_marginal_logprob for h in samples.hypotheses]
    if any(v is None for v in s):
        raise OrderingError("hypotheses carry no normalized marginal log-likelihood")
    return np.asarray(s, dtype=np.float64)


def hinge_terms(s: np.ndarray, epsilon_lb: float) -> tuple[float, np.ndarray, int]:
    """Ranking hinge on ascending-reward scores ``s``.

    Returns ``(loss, d loss / d s, active pair count)``. A hinge exactly at
    zero is treated as inactive.
    """
    K = len(s)
    if K < 2:
        return 0.0, np.zeros(K), 0
    idx = np.arange(K)
    i, j = idx[:, None], idx[None, :]
    # violation[i, j] for the better sample i over the worse sample j.
    violation = -s[:, None] + s[None, :] + (i - j) * epsilon_lb
    active = (i > j) & (violation > 0)
    norm = 2.0 / (K * (K - 1))
    loss = norm * float(np.sum(violation[active]))
    grad = norm * (active.sum(axis=0) - active.sum(axis=1)).astype(np.float64)
    return loss, grad, int(active.sum())


def contrastive_loss(samples: RankedSampleSet, epsilon_lb: float) -> float:
    s = _check_order(samples)
    return hinge_terms(s, epsilon_lb)[0]


def contrastive_gradient(samples: RankedSampleSet, epsilon_lb: float, lattice: Lattice,
                         constraint: Optional[str] = None) -> tuple[np.ndarray, np.ndarray]:
    """d(contrastive loss) / d(lattice logits); each active hinge pushes its pair apart."""
    s = _check_order(samples)
    _, ds, _ = hinge_terms(s, epsilon_lb)
    g_tok = np.zeros(lattice.token_logits.shape)
    g_trans = np.zeros(lattice.transition_logits.shape)
    live = [k for k in range(len(s)) if ds[k] != 0.0]
    if not live:
        return g_tok, g_trans
    hyps = [samples.hypotheses[k] for k in live]
    res = hypothesis_marginals(lattice, hyps, constraint, with_grad=True)
    w = np.array([ds[k] / len(samples.hypotheses[k].tokens) for k in live])
    g_tok += np.tensordot(w, res.grad_token, axes=1)
    g_trans += np.tensordot(w, res.grad_transition, axes=1)
    return g_tok, g_trans


def path_joint_gradient(lattice: Lattice, h: Hypothesis) -> tuple[np.ndarray, np.ndarray]:
    """d log q(y, a | x) / d(lattice logits) for one explicit path."""
    norm = lattice.normalized()
    g_tok = np.zeros(norm.token_logprobs.shape)
    g_trans = np.zeros(norm.transition_logprobs.shape)
    idx = np.asarray(h.path.indices)
    toks = np.asarray(h.tokens)
    np.add.at(g_tok, idx, -np.exp(norm.token_logprobs[idx]))
    np.add.at(g_tok, (idx, toks), 1.0)
    if len(idx) > 1:
        src, dst = idx[:-1], idx[1:]
        np.add.at(g_trans, src, -np.exp(norm.transition_logprobs[src]) * norm.mask[src])
        np.add.at(g_trans, (src, dst), 1.0)
    return g_tok, g_trans


def reward_loss(samples: Sequence[Hypothesis], lattice: Lattice) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Score-function surrogate ``-(1/K) sum_k (R_k - mean R) log q(y_k, a_k | x)`` and its gradient."""
    K = len(samples)
    if K < 2:
        raise DegenerateBaselineError(f"a mean-reward baseline needs K >= 2 samples, got {K}")
    rewards = np.array([h.reward for h in samples], dtype=np.float64)
    adv = rewards - rewards.mean()
    log_joint = np.array([h.log_joint for h in samples])
    loss = -float(np.dot(adv, log_joint)) / K
    g_tok = np.zeros(lattice.token_logits.shape)
    g_trans = np.zeros(lattice.transition_logits.shape)
    for a, h in zip(adv, samples):
        if a == 0.0:
            continue
        gt, gT = path_joint_gradient(lattice, h)
        g_tok -= (a / K) * gt
        g_trans -= (a / K) * gT
    return loss, (g_tok, g_trans)


@dataclass
class StepResult:
    report: LossReport
    grad_token: np.ndarray
    grad_transition: np.ndarray
    samples: list[Hypothesis] = field(default_factory=list)


def combined_step_loss(lattice: Lattice, target: Sequence[int], config: ObjectiveConfig,
                       rng: Optional[np.random.Generator] = None,
                       dp_result: Optional[tuple[float, np.ndarray, np.ndarray]] = None) -> StepResult:
    """Per-example ``dp_loss + cl_weight * cl_loss + rl_weight * rl_loss`` with gradients.

    ``dp_loss`` is the length-normalized NLL of ``target``. Examples whose
    ``dp_loss`` exceeds ``config.alpha`` skip the sample-based terms. A
    precomputed ``(logZ, d logZ/d token_logits, d logZ/d transition_logits)``
    may be passed to avoid recomputing the target DP.
    """
    constraint = config.constraint
    n = len(target)
    if dp_result is None:
        lat = lattice if lattice.constraint == constraint else lattice.with_constraint(constraint)
        logZ, _ = dp.dp_marginal_logprob(lat, target)
        gz_tok, gz_trans = dp.dp_gradient(lat, target)
    else:
        logZ, gz_tok, gz_trans = dp_result
    dp_loss = -float(logZ) / n
    g_tok = -np.asarray(gz_tok, dtype=np.float64) / n
    g_trans = -np.asarray(gz_trans, dtype=np.float64) / n
    report = LossReport(dp_loss=dp_loss, total=dp_loss)
    if config.cl_weight == 0 and config.rl_weight == 0:
        return StepResult(report, g_tok, g_trans)
    if sample_gate(dp_loss, config.alpha):
        report.gated = True
        return StepResult(report, g_tok, g_trans)

    lat = lattice if lattice.constraint == constraint else lattice.with_constraint(constraint)
    rng = np.random.default_rng() if rng is None else rng
    dcfg = DecodeConfig(temperature=config.temperature, top_p=config.top_p,
                        sample_count=config.sample_count, beta=config.beta)
    samples = batch_sample(lat, dcfg, rng)
    ref = strip_special(target)

    if config.cl_weight:
        ranked = filter_hypotheses(rank_samples(lat, samples, target, constraint), config.keep_ratio)
        if ranked.kept_count >= 2:
            fill_norm_marginals(lat, ranked.hypotheses, constraint)
            s = _check_order(ranked)
            cl, _, pairs = hinge_terms(s, config.epsilon_lb)
            report.cl_loss = cl
            report.pairs_evaluated = ranked.kept_count * (ranked.kept_count - 1) // 2
            if pairs:
                ct, cT = contrastive_gradient(ranked, config.epsilon_lb, lat, constraint)
                g_tok += config.cl_weight * ct
                g_trans += config.cl_weight * cT
    if config.rl_weight:
        for h in samples:
            h.reward = reward_fn(strip_special(h.tokens), ref)
        rl, (rt, rT) = reward_loss(samples, lat)
        report.rl_loss = rl
        g_tok += config.rl_weight * rt
        g_trans += config.rl_weight * rT
    report.total = report.dp_loss + config.cl_weight * report.cl_loss + config.rl_weight * report.rl_loss
    return StepResult(report, g_tok, g_trans, samples)
