"""Marginal likelihood over lattice alignments, its forward-backward gradient and Viterbi.

All recurrences run in log space on batched arrays::

    alpha[i, u] = log p(y_i | u) + logsumexp_v(alpha[i-1, v] + log E[v, u])

Rows of a batch may have different target lengths ``n`` and lattice lengths
``L``; padding is handled with per-row lengths. Single-lattice wrappers
(:func:`dp_marginal_logprob`, :func:`dp_gradient`, :func:`viterbi_align`) are
what most callers want; the ``batch_*`` functions serve the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InfeasibleTargetError, InvalidTargetError, VocabError
from .lattice import ANCHORED, NEG, Lattice, Path, log_softmax, masked_log_softmax


@dataclass
class ForwardTable:
    alpha: np.ndarray  # n x L
    logZ: float


@dataclass
class BatchDP:
    logZ: np.ndarray  # (B,)
    alpha: np.ndarray  # (B, n_max, L)
    grad_token: Optional[np.ndarray] = None  # (B, L, V), d logZ / d token logits
    grad_transition: Optional[np.ndarray] = None  # (B, L, L)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.log(np.sum(np.exp(x - m), axis=axis)) + np.squeeze(m, axis=axis)


def check_target(target: Sequence[int], L: int, V: int, constraint: str) -> np.ndarray:
    y = np.asarray(target, dtype=np.int64)
    n = y.shape[0]
    if n == 0:
        raise InvalidTargetError("empty target")
    if n > L:
        raise InfeasibleTargetError(f"target length {n} exceeds lattice length {L}")
    if constraint == ANCHORED and n == 1 and L > 1:
        raise InfeasibleTargetError("an anchored path needs at least 2 steps")
    if (y < 0).any() or (y >= V).any():
        raise VocabError(f"target ids must lie in [0, {V})")
    return y


def normalize_batch(token_logits: np.ndarray, transition_logits: np.ndarray,
                    L_lens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-normalize padded ``(B, L, V)`` / ``(B, L, L)`` logits.

    Transitions into positions at or beyond a row's own length are forbidden.
    """
    B, L, _ = token_logits.shape
    pos = np.arange(L)
    mask = (pos[None, :, None] < pos[None, None, :]) & (pos[None, None, :] < L_lens[:, None, None])
    mask = mask & (transition_logits > NEG / 2)
    return log_softmax(token_logits, axis=-1), masked_log_softmax(transition_logits, mask)


def _gather_emissions(token_logp: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # (B, L, V) x (B, n) -> (B, n, L)
    B, L, _ = token_logp.shape
    b = np.arange(B)[:, None, None]
    u = np.arange(L)[None, None, :]
    return token_logp[b, u, targets[:, :, None]]


def _start_and_end(B: int, L: int, L_lens: np.ndarray, anchored: bool, dtype):
    pos = np.arange(L)
    inside = pos[None, :] < L_lens[:, None]
    if anchored:
        start = np.where(pos[None, :] == 0, 0.0, NEG)
        end = np.where(pos[None, :] == (L_lens - 1)[:, None], 0.0, NEG)
    else:
        start = np.where(inside, 0.0, NEG)
        end = np.where(inside, 0.0, NEG)
    return np.broadcast_to(start, (B, L)).astype(dtype), end.astype(dtype)


def batch_marginal(token_logp: np.ndarray, trans_logp: np.ndarray, targets: np.ndarray,
                   n_lens: np.ndarray, L_lens: np.ndarray, constraint: str = ANCHORED,
                   with_grad: bool = False) -> BatchDP:
    """Batched log q(y|x) from normalized arrays; optionally d logZ / d logits.

    ``targets`` is ``(B, n_max)`` padded with any valid id. Gradients are with
    respect to the *unnormalized* logits, i.e. pushed through both softmaxes.
    ``trans_logp`` may be a single ``(L, L)`` matrix shared by every row.
    """
    B, L, V = token_logp.shape
    n_max = targets.shape[1]
    dtype = token_logp.dtype
    anchored = constraint == ANCHORED
    shared = trans_logp.ndim == 2
    T = trans_logp[None] if shared else trans_logp
    rows = np.arange(B)

    emit = _gather_emissions(token_logp, targets)
    step_ok = np.arange(n_max)[None, :] < n_lens[:, None]
    emit = np.where(step_ok[:, :, None], emit, 0.0).astype(dtype, copy=False)
    start, end = _start_and_end(B, L, L_lens, anchored, dtype)

    alpha = np.empty((B, n_max, L), dtype=dtype)
    alpha[:, 0] = emit[:, 0] + start
    for i in range(1, n_max):
        alpha[:, i] = emit[:, i] + _lse(alpha[:, i - 1, :, None] + T, axis=1)
    last = alpha[rows, n_lens - 1]
    logZ = _lse(last + end, axis=1)
    out = BatchDP(logZ=logZ, alpha=alpha)
    if not with_grad:
        return out

    beta = np.empty_like(alpha)
    beta[:, n_max - 1] = end
    for i in range(n_max - 2, -1, -1):
        nxt = emit[:, i + 1] + beta[:, i + 1]
        b = _lse(T + nxt[:, None, :], axis=2)
        beta[:, i] = np.where((n_lens - 1 == i)[:, None], end, b)

    post = np.exp(alpha + beta - logZ[:, None, None]) * step_ok[:, :, None]
    occupancy = post.sum(axis=1)  # (B, L)
    counts = np.zeros((B, L, V), dtype=dtype)
    for i in range(n_max):
        counts[rows, :, targets[:, i]] += post[:, i]
    grad_tok = counts - np.exp(token_logp) * occupancy[:, :, None]

    flow = np.zeros((B, L, L), dtype=dtype)
    for i in range(1, n_max):
        w = alpha[:, i - 1, :, None] + T + (emit[:, i] + beta[:, i])[:, None, :] - logZ[:, None, None]
        flow += np.exp(w) * step_ok[:, i, None, None]
    E = np.exp(T)
    grad_trans = flow - E * flow.sum(axis=2, keepdims=True)
    grad_trans = np.where(T > NEG / 2, grad_trans, 0.0)
    out.grad_token = grad_tok
    out.grad_transition = grad_trans
    return out


def batch_viterbi(token_logp: np.ndarray, trans_logp: np.ndarray, targets: np.ndarray,
                  n_lens: np.ndarray, L_lens: np.ndarray,
                  constraint: str = ANCHORED) -> tuple[np.ndarray, np.ndarray]:
    """Best alignment per row: ``(paths (B, n_max) padded with -1, joint scores (B,))``.

    Among equally scored paths the lexicographically smallest one wins: suffix
    maxima are tabulated backwards, then positions are chosen front to back
    taking the first maximizer at every step.
    """
    B, L, V = token_logp.shape
    n_max = targets.shape[1]
    dtype = token_logp.dtype
    anchored = constraint == ANCHORED
    T = trans_logp[None] if trans_logp.ndim == 2 else trans_logp
    rows = np.arange(B)
    emit = _gather_emissions(token_logp, targets)
    step_ok = np.arange(n_max)[None, :] < n_lens[:, None]
    emit = np.where(step_ok[:, :, None], emit, 0.0).astype(dtype, copy=False)
    start, end = _start_and_end(B, L, L_lens, anchored, dtype)

    suffix = np.empty((B, n_max, L), dtype=dtype)
    suffix[:, n_max - 1] = end
    for i in range(n_max - 2, -1, -1):
        s = np.max(T + (emit[:, i + 1] + suffix[:, i + 1])[:, None, :], axis=2)
        suffix[:, i] = np.where((n_lens - 1 == i)[:, None], end, s)

    paths = np.full((B, n_max), -1, dtype=np.int64)
    first = start + emit[:, 0] + suffix[:, 0]
    cur = np.argmax(first, axis=1)
    score = first[rows, cur]
    paths[:, 0] = cur
    Tb = np.broadcast_to(T, (B, L, L))
    for i in range(1, n_max):
        cand = Tb[rows, cur] + emit[:, i] + suffix[:, i]
        nxt = np.argmax(cand, axis=1)
        live = step_ok[:, i]
        cur = np.where(live, nxt, cur)
        paths[:, i] = np.where(live, nxt, -1)
    return paths, score


def _single(lattice: Lattice, target: Sequence[int], constraint: Optional[str]):
    constraint = constraint or lattice.constraint
    if constraint != lattice.constraint:
        lattice = lattice.with_constraint(constraint)
    y = check_target(target, lattice.L, lattice.V, constraint)
    norm = lattice.normalized()
    return (norm.token_logprobs[None], norm.transition_logprobs, y[None],
            np.array([len(y)]), np.array([lattice.L]), constraint)


def dp_marginal_logprob(lattice: Lattice, target: Sequence[int],
                        constraint: Optional[str] = None) -> tuple[float, ForwardTable]:
    tok, trans, y, n, L, constraint = _single(lattice, target, constraint)
    res = batch_marginal(tok, trans, y, n, L, constraint)
    logZ = float(res.logZ[0])
    return logZ, ForwardTable(alpha=res.alpha[0], logZ=logZ)


def dp_gradient(lattice: Lattice, target: Sequence[int],
                constraint: Optional[str] = None) -> tuple[np.ndarray, np.ndarray]:
    """``(d log q(y|x) / d token_logits, d log q(y|x) / d transition_logits)``."""
    tok, trans, y, n, L, constraint = _single(lattice, target, constraint)
    res = batch_marginal(tok, trans, y, n, L, constraint, with_grad=True)
    return res.grad_token[0], res.grad_transition[0]


def viterbi_align(lattice: Lattice, target: Sequence[int], constraint: Optional[str] = None) -> Path:
    tok, trans, y, n, L, constraint = _single(lattice, target, constraint)
    paths, _ = batch_viterbi(tok, trans, y, n, L, constraint)
    return Path(tuple(paths[0]))
