"""Synthetic multi-reference corpora: every source has M valid targets, one per transform.

A target is ``<s> transform(content) </s>`` and a source is ``<s> content </s>``.
Output that splices two transforms matches no valid target, which makes
mixed-modality errors countable exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, CorpusError, GenerationError
from .lattice import BOS, EOS, RESERVED, Vocabulary

logger = logging.getLogger(__name__)

MARKER = "<mk>"
MAX_RESAMPLES = 100

Tokens = tuple[int, ...]


@dataclass(frozen=True)
class CorpusExample:
    source: Tokens
    sampled_target: Tokens
    valid_targets: tuple[Tokens, ...]

    def __post_init__(self):
        if not 1 <= len(self.valid_targets) <= 8:
            raise CorpusError(f"need 1..8 valid targets, got {len(self.valid_targets)}")
        if self.sampled_target not in self.valid_targets:
            raise CorpusError("sampled target is not among the valid targets")
        if len(set(self.valid_targets)) != len(self.valid_targets):
            raise CorpusError("valid targets are not distinct")
        for seq in (self.source, *self.valid_targets):
            if len(seq) < 2 or seq[0] != BOS or seq[-1] != EOS:
                raise CorpusError("sequences must be framed as <s> ... </s>")


Corpus = list[CorpusExample]


def _reverse(x: Tokens) -> Tokens:
    return x[::-1]


def _pairwise_swap(x: Tokens) -> Tokens:
    out = list(x)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return tuple(out)


def _cyclic_shift(k: int) -> Callable[[Tokens], Tokens]:
    def shift(x: Tokens) -> Tokens:
        s = k % len(x)
        return x[s:] + x[:s]
    return shift


def parse_transform(name: str, marker_id: int) -> Callable[[Tokens], Tokens]:
    name = name.strip()
    if name in ("copy", "identity"):
        return lambda x: x
    if name == "reverse":
        return _reverse
    if name == "pairwise-swap":
        return _pairwise_swap
    if name == "marker-prefix":
        return lambda x: (marker_id,) + x
    if name.startswith("cyclic-shift"):
        arg = name[len("cyclic-shift"):].strip("()")
        try:
            return _cyclic_shift(int(arg) if arg else 1)
        except ValueError:
            raise ConfigError(f"bad shift in transform {name!r}") from None
    raise ConfigError(f"unknown transform {name!r}")


@dataclass
class TaskSpec:
    vocab_size: int = 32
    min_len: int = 6
    max_len: int = 10
    transforms: tuple[str, ...] = ("copy", "reverse")
    train_size: int = 10_000
    valid_size: int = 500
    test_size: int = 500
    seed: int = 0

    def __post_init__(self):
        self.transforms = tuple(self.transforms)
        if not 1 <= len(self.transforms) <= 8:
            raise ConfigError(f"modality count must be 1..8, got {len(self.transforms)}")
        if self.vocab_size < len(RESERVED) + 3:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves too few content tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad source length range {self.min_len}..{self.max_len}")
        if min(self.train_size, self.valid_size, self.test_size) < 0:
            raise ConfigError("corpus sizes must be non-negative")

    @property
    def modality_count(self) -> int:
        return len(self.transforms)


def build_vocabulary(spec: TaskSpec) -> Vocabulary:
    """Reserved symbols, the marker, then ``w<i>`` content tokens up to ``vocab_size``."""
    vocab = Vocabulary()
    vocab.add(MARKER)
    for i in range(len(vocab), spec.vocab_size):
        vocab.add(f"w{i}")
    return vocab


def content_ids(vocab: Vocabulary) -> np.ndarray:
    return np.arange(vocab.lookup(MARKER) + 1, len(vocab))


def frame(content: Sequence[int]) -> Tokens:
    return (BOS, *content, EOS)


def _targets_for(content: Tokens, transforms) -> tuple[Tokens, ...]:
    return tuple(frame(t(content)) for t in transforms)


def _draw_source(rng: np.random.Generator, ids: np.ndarray, spec: TaskSpec, transforms,
                 taken: set) -> tuple[Tokens, tuple[Tokens, ...]]:
    for _ in range(MAX_RESAMPLES):
        m = int(rng.integers(spec.min_len, spec.max_len + 1))
        content = tuple(int(t) for t in rng.choice(ids, size=m))
        targets = _targets_for(content, transforms)
        if len(set(targets)) == len(targets) and content not in taken:
            taken.add(content)
            return content, targets
    raise GenerationError(f"no source with {len(transforms)} distinct targets after {MAX_RESAMPLES} draws")


def gen_corpus(spec: TaskSpec) -> tuple[Corpus, Corpus, Corpus, Vocabulary]:
    """Seeded train/valid/test splits, disjoint by source; each sampled target is uniform over modalities."""
    vocab = build_vocabulary(spec)
    transforms = [parse_transform(t, vocab.lookup(MARKER)) for t in spec.transforms]
    ids = content_ids(vocab)
    rng = np.random.default_rng(spec.seed)
    taken: set = set()
    splits = []
    choices = []
    for size, train in ((spec.train_size, True), (spec.valid_size, False), (spec.test_size, False)):
        split = []
        for _ in range(size):
            content, targets = _draw_source(rng, ids, spec, transforms, taken)
            j = int(rng.integers(len(targets)))
            if train:
                choices.append(j)
            split.append(CorpusExample(frame(content), targets[j], targets))
        splits.append(split)
    _check_balance(choices, spec.modality_count)
    return splits[0], splits[1], splits[2], vocab


def _check_balance(choices: Sequence[int], M: int) -> None:
    N = len(choices)
    if N == 0 or M == 1:
        return
    counts = np.bincount(choices, minlength=M)
    p = 1.0 / M
    sigma = math.sqrt(N * p * (1 - p))
    for j, c in enumerate(counts):
        if abs(c - N * p) > 3 * sigma:
            logger.warning("modality %d drawn %d times out of %d (expected %.1f +/- %.1f)", j, c, N, N * p, sigma)


def _surface(vocab: Vocabulary, seq: Tokens) -> str:
    return " ".join(vocab.decode(seq, strip_special=True))


def save_corpus(corpus: Corpus, path, vocab: Vocabulary, multi_ref: bool = False) -> None:
    """Training files hold ``source<TAB>target``; multi-reference files list every target,
    the sampled one first."""
    lines = []
    for ex in corpus:
        if multi_ref:
            refs = [ex.sampled_target] + [t for t in ex.valid_targets if t != ex.sampled_target]
        else:
            refs = [ex.sampled_target]
        lines.append("\t".join([_surface(vocab, ex.source)] + [_surface(vocab, r) for r in refs]))
    FsPath(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_corpus(path, vocab: Vocabulary, multi_ref: bool = False) -> Corpus:
    corpus = []
    text = FsPath(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields_ = line.split("\t")
        if len(fields_) < 2 or (not multi_ref and len(fields_) != 2):
            raise CorpusError(f"{path}:{lineno}: expected {'source and targets' if multi_ref else 'source<TAB>target'}")
        seqs = []
        for f in fields_:
            words = f.split()
            if not words:
                raise CorpusError(f"{path}:{lineno}: empty field")
            ids = vocab.encode(words)
            if any(vocab.surface(i) != w for i, w in zip(ids, words)):
                raise CorpusError(f"{path}:{lineno}: token outside the vocabulary")
            seqs.append(frame(ids))
        try:
            corpus.append(CorpusExample(seqs[0], seqs[1], tuple(seqs[1:])))
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return corpus


@dataclass
class Batch:
    indices: list[int]
    sources: list[Tokens] = field(default_factory=list)
    targets: list[Tokens] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return sum(len(s) + len(t) for s, t in zip(self.sources, self.targets))


def make_batches(corpus: Corpus, max_tokens: int, seed: int) -> list[Batch]:
    """Length-bucketed batches under a source+target token budget, in seeded random order."""
    sizes = [len(ex.source) + len(ex.sampled_target) for ex in corpus]
    for i, s in enumerate(sizes):
        if s > max_tokens:
            raise CorpusError(f"example {i} has {s} tokens, over the budget of {max_tokens}")
    rng = np.random.default_rng(seed)
    jitter = rng.random(len(corpus))
    order = np.lexsort((jitter, np.asarray(sizes)))
    batches: list[Batch] = []
    cur: list[int] = []
    used = 0
    for i in order.tolist():
        if cur and used + sizes[i] > max_tokens:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += sizes[i]
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    out = []
    for b in perm:
        idx = batches[b]
        out.append(Batch(idx, [corpus[i].source for i in idx], [corpus[i].sampled_target for i in idx]))
    return out


def iter_epochs(corpus: Corpus, max_tokens: int, seed: int, start_epoch: int = 0) -> Iterator[tuple[int, list[Batch]]]:
    epoch = start_epoch
    while True:
        yield epoch, make_batches(corpus, max_tokens, seed + 1_000_003 * epoch)
        epoch += 1


def write_dataset(out_dir, spec: TaskSpec, splits: Optional[tuple] = None) -> dict[str, FsPath]:
    """Write ``train.tsv``, ``valid.tsv``, ``test.tsv`` and ``vocab.txt`` under ``out_dir``."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, valid, test, vocab = splits if splits is not None else gen_corpus(spec)
    paths = {name: out / f"{name}.tsv" for name in ("train", "valid", "test")}
    paths["vocab"] = out / "vocab.txt"
    save_corpus(train, paths["train"], vocab)
    save_corpus(valid, paths["valid"], vocab, multi_ref=True)
    save_corpus(test, paths["test"], vocab, multi_ref=True)
    vocab.save(paths["vocab"])
    return paths
