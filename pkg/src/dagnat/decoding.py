"""Lattice decoders: greedy lookahead, nucleus-filtered sampling and the table-driven multi-sampler.

Every decoder precomputes one token per position (its argmax) and only the
path is searched or sampled; a hypothesis always starts at position 0.
Transition and token scores are combined in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .lattice import EOS, Hypothesis, Lattice, NormalizedLattice, Path

BETA_GRID = (0.3, 0.5, 0.7)


@dataclass
class DecodeConfig:
    max_step: Optional[int] = None  # None: the lattice length
    temperature: float = 0.05
    top_p: float = 0.5
    sample_count: int = 128
    beta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.max_step is not None and self.max_step < 1:
            raise ValueError(f"max_step must be >= 1, got {self.max_step}")

    def steps_for(self, L: int) -> int:
        return L if self.max_step is None else min(self.max_step, L)


def _position_tokens(norm: NormalizedLattice) -> tuple[np.ndarray, np.ndarray]:
    best = np.argmax(norm.token_logprobs, axis=1)
    return best, norm.token_logprobs[np.arange(norm.L), best]


def _make_hypothesis(norm: NormalizedLattice, path: Sequence[int], tokens: np.ndarray,
                     token_lp: np.ndarray) -> Hypothesis:
    idx = np.asarray(path)
    log_trans = float(norm.transition_logprobs[idx[:-1], idx[1:]].sum()) if len(idx) > 1 else 0.0
    toks = tokens[idx]
    return Hypothesis(tokens=tuple(toks.tolist()), path=Path(tuple(idx.tolist())),
                      log_transition=log_trans, log_emission=float(token_lp[idx].sum()),
                      truncated=bool(toks[-1] != EOS))


def _stops(pos: int, token: int, steps: int, L: int, max_step: int) -> bool:
    return token == EOS or pos == L - 1 or steps >= max_step


def lookahead_decode(lattice: Lattice, max_step: Optional[int] = None) -> Hypothesis:
    """Greedy walk on ``log E + best-token log-prob`` of the successor; ties go to the lower index."""
    norm = lattice.normalized()
    L = norm.L
    max_step = L if max_step is None else min(max_step, L)
    tokens, token_lp = _position_tokens(norm)
    scores = norm.transition_logprobs + token_lp[None, :]
    path = [0]
    while not _stops(path[-1], tokens[path[-1]], len(path), L, max_step):
        path.append(int(np.argmax(scores[path[-1]])))
    return _make_hypothesis(norm, path, tokens, token_lp)


def top_p_filter(row: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest most-probable prefix reaching mass ``p``; renormalize; the rest -> -inf."""
    row = np.asarray(row, dtype=np.float64)
    probs = np.exp(row)
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p * cum[-1] - 1e-12, side="left"))
    keep = np.zeros(row.shape, dtype=bool)
    keep[order[: k + 1]] = True
    kept = row[keep]
    m = kept.max()
    log_norm = m + np.log(np.exp(kept - m).sum())
    return np.where(keep, row - log_norm, -np.inf)


def transition_sampling_probs(norm: NormalizedLattice, temperature: float, top_p: float) -> np.ndarray:
    """Row-stochastic successor distribution used by the samplers (terminal row is all zero).

    Per row: ``log E + log(t / sum t)`` with ``t`` the per-position best-token
    probability, normalized over allowed successors, nucleus-filtered, then
    ``softmax(. / temperature)``.
    """
    L = norm.L
    _, token_lp = _position_tokens(norm)
    t = np.exp(token_lp)
    log_t = np.log(t / t.sum())
    probs = np.zeros((L, L))
    for v in range(L - 1):
        allowed = norm.mask[v]
        row = norm.transition_logprobs[v, allowed] + log_t[allowed]
        m = row.max()
        row = row - (m + np.log(np.exp(row - m).sum()))
        filtered = top_p_filter(row, top_p) / temperature
        fm = filtered.max()
        w = np.exp(filtered - fm)
        probs[v, allowed] = w / w.sum()
    return probs


def _draw(cdf_row: np.ndarray, u: float) -> int:
    return int(np.searchsorted(cdf_row, u * cdf_row[-1], side="right"))


def sample_decode(lattice: Lattice, config: DecodeConfig,
                  rng: Optional[np.random.Generator] = None) -> Hypothesis:
    """One stochastic walk from position 0, one categorical draw per step."""
    norm = lattice.normalized()
    L = norm.L
    max_step = config.steps_for(L)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tokens, token_lp = _position_tokens(norm)
    cdf = np.cumsum(transition_sampling_probs(norm, config.temperature, config.top_p), axis=1)
    path = [0]
    while not _stops(path[-1], tokens[path[-1]], len(path), L, max_step):
        path.append(_draw(cdf[path[-1]], rng.random()))
    return _make_hypothesis(norm, path, tokens, token_lp)


def batch_sample(lattice: Lattice, config: DecodeConfig,
                 rng: Optional[np.random.Generator] = None) -> list[Hypothesis]:
    """``K`` walks driven by pre-drawn successor tables, returned in chain order.

    Chain ``k`` owns the block ``u[k]`` of shape ``(L, max_step)``: entry
    ``(v, i)`` is the uniform that picks the step-``i`` successor when the chain
    sits at position ``v``. Each chain uses independent columns, so a chain is
    distributed exactly like :func:`sample_decode`. Table entries are inverted
    through the row CDF only when a chain visits them.
    """
    norm = lattice.normalized()
    L = norm.L
    K = config.sample_count
    max_step = config.steps_for(L)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    tokens, token_lp = _position_tokens(norm)
    cdf = np.cumsum(transition_sampling_probs(norm, config.temperature, config.top_p), axis=1)
    table = rng.random((K, L, max_step))

    chains = np.arange(K)
    paths = np.full((K, max_step), -1, dtype=np.int64)
    paths[:, 0] = 0
    pos = np.zeros(K, dtype=np.int64)
    lengths = np.ones(K, dtype=np.int64)
    live = (tokens[pos] != EOS) & (pos != L - 1) & (max_step > 1)
    step = 1
    while live.any():
        idx = chains[live]
        rows = cdf[pos[idx]]
        u = table[idx, pos[idx], step] * rows[:, -1]
        nxt = np.minimum((rows <= u[:, None]).sum(axis=1), L - 1)
        pos[idx] = nxt
        paths[idx, step] = nxt
        lengths[idx] += 1
        step += 1
        live[idx] = (tokens[nxt] != EOS) & (nxt != L - 1) & (step < max_step)
    return [_make_hypothesis(norm, paths[k, : lengths[k]], tokens, token_lp) for k in range(K)]


def rescore_value(h: Hypothesis, beta: float) -> float:
    return (beta * h.log_emission + (1.0 - beta) * h.log_transition) / len(h.tokens)


def rescore(hypotheses: Iterable[Hypothesis], beta: float = 0.5) -> list[Hypothesis]:
    """Stable descending sort by the length-normalized beta mix of the two log scores."""
    return sorted(hypotheses, key=lambda h: -rescore_value(h, beta))


def dedup(hypotheses: Iterable[Hypothesis], beta: float = 0.5) -> list[Hypothesis]:
    """Drop repeated token sequences, keeping the best-rescored instance in first-seen order."""
    best: dict[tuple[int, ...], Hypothesis] = {}
    for h in hypotheses:
        cur = best.get(h.tokens)
        if cur is None or rescore_value(h, beta) > rescore_value(cur, beta):
            best[h.tokens] = h
    return list(best.values())
