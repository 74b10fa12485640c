"""DAG lattice data model: vocabulary, lattices, paths and exhaustive path oracles.

A lattice is one example's decoder output: an ``L x V`` matrix of token logits
and an ``L x L`` matrix of transition logits over decoder positions. A
hypothesis is a strictly increasing walk through the positions; it emits one
token per visited position.
"""

from __future__ import annotations

import functools
import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateRowError,
    InvalidLatticeError,
    InvalidPathError,
    OracleTooLargeError,
    VocabError,
)

ANCHORED = "anchored"
FREE = "free"
CONSTRAINTS = (ANCHORED, FREE)

# Masked logits are stored as a large negative sentinel instead of -inf.
NEG = -1e9

ENUMERATION_CAP = 10**6

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class Vocabulary:
    """Dense id <-> surface mapping with the four reserved ids fixed up front."""

    def __init__(self, symbols: Iterable[str] = ()):
        self.tokens: list[str] = list(RESERVED)
        self._index: dict[str, int] = {tok: i for i, tok in enumerate(RESERVED)}
        for sym in symbols:
            self.add(sym)

    def add(self, surface: str) -> int:
        if surface in self._index:
            return self._index[surface]
        if not surface or any(ch.isspace() for ch in surface):
            raise VocabError(f"invalid surface token {surface!r}")
        self._index[surface] = len(self.tokens)
        self.tokens.append(surface)
        return self._index[surface]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, surface: str) -> int:
        return self._index.get(surface, UNK)

    def surface(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabError(f"token id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def encode(self, surfaces: Sequence[str]) -> list[int]:
        return [self.lookup(s) for s in surfaces]

    def decode(self, ids: Sequence[int], strip_special: bool = True) -> list[str]:
        if strip_special:
            ids = [i for i in ids if i not in (PAD, BOS, EOS)]
        return [self.surface(i) for i in ids]

    def save(self, path) -> None:
        FsPath(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = FsPath(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise VocabError(f"{path}: first four lines must be {' '.join(RESERVED)}")
        return cls(lines[4:])


def _check_constraint(constraint: str) -> str:
    if constraint not in CONSTRAINTS:
        raise InvalidLatticeError(f"unknown constraint {constraint!r}; expected one of {CONSTRAINTS}")
    return constraint


@dataclass(frozen=True)
class Path:
    """Strictly increasing decoder positions visited by a hypothesis."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise InvalidPathError("empty path")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InvalidPathError(f"path {idx} is not strictly increasing")

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def is_anchored(self, L: int) -> bool:
        return self.indices[0] == 0 and self.indices[-1] == L - 1


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    path: Path
    log_transition: float
    log_emission: float
    reward: Optional[float] = None
    norm_marginal_logprob: Optional[float] = None
    truncated: bool = False

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        if len(self.tokens) != len(self.path):
            raise InvalidPathError(
                f"{len(self.tokens)} tokens for a path of {len(self.path)} positions"
            )

    @property
    def log_joint(self) -> float:
        return self.log_transition + self.log_emission


def build_transition_mask(L: int, constraint: str = ANCHORED) -> np.ndarray:
    """Boolean ``L x L`` mask; entry ``(i, j)`` is allowed iff ``j > i``.

    Anchoring (start at 0, end at ``L - 1``) is not a property of single
    transitions and is enforced by the DP and the decoders.
    """
    _check_constraint(constraint)
    if L < 2:
        raise InvalidLatticeError(f"lattice needs at least 2 positions, got L={L}")
    return np.triu(np.ones((L, L), dtype=bool), k=1)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def logsumexp(x: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row log-softmax over allowed entries; forbidden entries are pinned to NEG.

    Rows with no allowed entry come out entirely NEG.
    """
    filled = np.where(mask, logits, NEG)
    return np.where(mask, log_softmax(filled, axis=-1), NEG)


@dataclass(frozen=True)
class NormalizedLattice:
    token_logprobs: np.ndarray
    transition_logprobs: np.ndarray
    mask: np.ndarray
    constraint: str

    @property
    def L(self) -> int:
        return self.token_logprobs.shape[0]

    @property
    def V(self) -> int:
        return self.token_logprobs.shape[1]


@dataclass(frozen=True)
class Lattice:
    token_logits: np.ndarray
    transition_logits: np.ndarray
    constraint: str = ANCHORED
    _normalized: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        tok = np.array(self.token_logits, copy=True)
        trans = np.array(self.transition_logits, copy=True)
        if tok.dtype.kind != "f":
            tok = tok.astype(np.float64)
        if trans.dtype.kind != "f":
            trans = trans.astype(tok.dtype)
        if tok.ndim != 2 or trans.ndim != 2:
            raise InvalidLatticeError("token_logits must be L x V and transition_logits L x L")
        L = tok.shape[0]
        if L < 2:
            raise InvalidLatticeError(f"lattice needs at least 2 positions, got L={L}")
        if trans.shape != (L, L):
            raise InvalidLatticeError(f"transition_logits shape {trans.shape} != ({L}, {L})")
        if np.isnan(tok).any() or np.isnan(trans).any():
            raise InvalidLatticeError("NaN in lattice logits")
        if not np.isfinite(tok).all():
            raise InvalidLatticeError("token logits must be finite")
        _check_constraint(self.constraint)
        tok.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "token_logits", tok)
        object.__setattr__(self, "transition_logits", trans)

    @property
    def L(self) -> int:
        return self.token_logits.shape[0]

    @property
    def V(self) -> int:
        return self.token_logits.shape[1]

    def with_constraint(self, constraint: str) -> "Lattice":
        return Lattice(self.token_logits, self.transition_logits, constraint)

    def normalized(self) -> NormalizedLattice:
        if "view" not in self._normalized:
            self._normalized["view"] = normalize_lattice(self)
        return self._normalized["view"]


def normalize_lattice(lattice: Lattice) -> NormalizedLattice:
    L = lattice.L
    mask = build_transition_mask(L, lattice.constraint)
    # -inf (or sentinel-level) logits count as forbidden entries.
    mask = mask & (lattice.transition_logits > NEG / 2)
    dead = ~mask[:-1].any(axis=1)
    if dead.any():
        row = int(np.flatnonzero(dead)[0])
        raise DegenerateRowError(f"transition row {row} has no allowed successor")
    tok = log_softmax(lattice.token_logits, axis=-1)
    trans = masked_log_softmax(lattice.transition_logits, mask)
    for arr in (tok, trans):
        arr.setflags(write=False)
    return NormalizedLattice(tok, trans, mask, lattice.constraint)


def path_score_components(lattice: Lattice, path: Path | Sequence[int], tokens: Sequence[int]) -> tuple[float, float]:
    """Return ``(log q(a|x), log q(y|a,x))`` for an explicit path and its tokens."""
    if not isinstance(path, Path):
        path = Path(tuple(path))
    if len(tokens) != len(path):
        raise InvalidPathError(f"{len(tokens)} tokens for a path of {len(path)} positions")
    if path.indices[0] < 0 or path.indices[-1] >= lattice.L:
        raise InvalidPathError(f"path {path.indices} leaves lattice of length {lattice.L}")
    for t in tokens:
        if not 0 <= int(t) < lattice.V:
            raise VocabError(f"token id {t} outside vocabulary of size {lattice.V}")
    norm = lattice.normalized()
    log_trans = 0.0
    for a, b in zip(path.indices, path.indices[1:]):
        log_trans += float(norm.transition_logprobs[a, b])
    log_emit = 0.0
    for pos, tok in zip(path.indices, tokens):
        log_emit += float(norm.token_logprobs[pos, int(tok)])
    return log_trans, log_emit


def path_joint_logprob(lattice: Lattice, path: Path | Sequence[int], tokens: Sequence[int]) -> float:
    log_trans, log_emit = path_score_components(lattice, path, tokens)
    return log_trans + log_emit


def enumerate_paths(L: int, n: int, constraint: str = ANCHORED, cap: int = ENUMERATION_CAP) -> list[Path]:
    """All admissible alignments of ``n`` target steps to ``L`` positions, lexicographic."""
    _check_constraint(constraint)
    if not 1 <= n <= L:
        raise InvalidPathError(f"need 1 <= n <= L, got n={n}, L={L}")
    count = path_count(L, n, constraint)
    if count > cap:
        raise OracleTooLargeError(f"{count} paths exceed the enumeration cap of {cap}")
    if constraint == FREE:
        return [Path(c) for c in itertools.combinations(range(L), n)]
    if count == 0:
        return []
    if n == 1:
        return [Path((0,))]
    return [Path((0, *mid, L - 1)) for mid in itertools.combinations(range(1, L - 1), n - 2)]


def brute_force_marginal(lattice: Lattice, tokens: Sequence[int], constraint: Optional[str] = None,
                         cap: int = ENUMERATION_CAP) -> float:
    """log-sum-exp of the joint score over every enumerated alignment (-inf if none)."""
    constraint = constraint or lattice.constraint
    if constraint != lattice.constraint:
        lattice = lattice.with_constraint(constraint)
    paths = enumerate_paths(lattice.L, len(tokens), constraint, cap)
    if not paths:
        return float("-inf")
    scores = np.array([path_joint_logprob(lattice, p, tokens) for p in paths], dtype=np.float64)
    m = scores.max()
    return float(m + math.log(np.exp(scores - m).sum()))


_CLAT_MAGIC = b"CLAT"
_CLAT_VERSION = 1


def dump_lattice(lattice: Lattice, fh: BinaryIO) -> None:
    fh.write(_CLAT_MAGIC)
    fh.write(struct.pack("<III", _CLAT_VERSION, lattice.L, lattice.V))
    fh.write(np.ascontiguousarray(lattice.token_logits, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(lattice.transition_logits, dtype="<f4").tobytes())


def load_lattice(fh: BinaryIO, constraint: str = ANCHORED) -> Lattice:
    magic = fh.read(4)
    if magic != _CLAT_MAGIC:
        raise InvalidLatticeError(f"bad lattice magic {magic!r}")
    version, L, V = struct.unpack("<III", fh.read(12))
    if version != _CLAT_VERSION:
        raise InvalidLatticeError(f"unsupported lattice dump version {version}")
    tok = np.frombuffer(fh.read(4 * L * V), dtype="<f4").reshape(L, V)
    trans = np.frombuffer(fh.read(4 * L * L), dtype="<f4").reshape(L, L)
    return Lattice(tok.astype(np.float32), trans.astype(np.float32), constraint)


@functools.lru_cache(maxsize=None)
def path_count(L: int, n: int, constraint: str) -> int:
    if constraint == FREE:
        return math.comb(L, n)
    if n == 1:
        return int(L == 1)
    return math.comb(L - 2, n - 2)
