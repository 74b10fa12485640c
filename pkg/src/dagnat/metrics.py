"""Reward and evaluation metrics over token-id (or surface) sequences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

from .errors import DagnatError

MAX_ORDER = 4

Seq = Sequence[Hashable]


@dataclass
class EvalReport:
    corpus_bleu: float
    ncm: float
    oracle_bleu: float
    exact_valid_match_rate: float
    multi_ref_bleu: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(seq: Seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_stats(hyp: Seq, ref: Seq) -> list[int]:
    """``[c, r, match_1, total_1, ..., match_4, total_4]`` with clipped matches."""
    stats = [len(hyp), len(ref)]
    for n in range(1, MAX_ORDER + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        stats.append(sum(min(c, r[g]) for g, c in h.items()))
        stats.append(max(len(hyp) - n + 1, 0))
    return stats


def _brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def sentence_bleu(hyp: Seq, ref: Seq) -> float:
    """Smoothed sentence BLEU-4.

    A zero n-gram match count at order ``k`` is replaced by ``1 / (2^j * N_k)``
    where ``N_k`` is the number of hypothesis n-grams (at least 1) and ``j``
    is the running count of zero orders so far, starting at 1. Orders longer
    than the reference cannot match anything and are left out of the mean.
    """
    if len(ref) == 0:
        raise DagnatError("empty reference")
    if len(hyp) == 0:
        return 0.0
    stats = bleu_stats(hyp, ref)
    orders = min(MAX_ORDER, len(ref))
    log_p = 0.0
    zeros = 0
    for k in range(orders):
        match, total = stats[2 + 2 * k], max(stats[3 + 2 * k], 1)
        if match == 0:
            zeros += 1
            p = 1.0 / (2**zeros * total)
        else:
            p = match / total
        log_p += math.log(p) / orders
    return _brevity_penalty(len(hyp), len(ref)) * math.exp(log_p)


def bleu_from_stats(stats: Sequence[int]) -> float:
    c, r = stats[0], stats[1]
    if c == 0:
        return 0.0
    log_p = 0.0
    for k in range(MAX_ORDER):
        match, total = stats[2 + 2 * k], stats[3 + 2 * k]
        if match == 0 or total == 0:
            return 0.0
        log_p += math.log(match / total) / MAX_ORDER
    return _brevity_penalty(c, r) * math.exp(log_p)


def corpus_bleu(hyps: Sequence[Seq], refs: Sequence[Seq]) -> float:
    """Unsmoothed BLEU-4 from clipped counts pooled over the corpus."""
    if len(hyps) != len(refs):
        raise DagnatError(f"{len(hyps)} hypotheses but {len(refs)} references")
    totals = [0] * (2 + 2 * MAX_ORDER)
    for h, r in zip(hyps, refs):
        for i, v in enumerate(bleu_stats(h, r)):
            totals[i] += v
    return bleu_from_stats(totals)


def _lcs(a: Seq, b: Seq) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Seq, ref: Seq) -> float:
    """LCS F1 (precision and recall weighted equally)."""
    if len(ref) == 0:
        raise DagnatError("empty reference")
    if len(hyp) == 0:
        return 0.0
    lcs = _lcs(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def ncm(nlls: Sequence[float], ref_lengths: Sequence[int]) -> float:
    """Mean NLL over mean reference length (ratio of means)."""
    if len(nlls) != len(ref_lengths):
        raise DagnatError(f"{len(nlls)} NLLs but {len(ref_lengths)} lengths")
    if not nlls:
        raise DagnatError("NCM of an empty corpus")
    if min(ref_lengths) < 1:
        raise DagnatError("reference lengths must be >= 1")
    return (math.fsum(nlls) / len(nlls)) / (sum(ref_lengths) / len(ref_lengths))


def multi_ref_sentence_bleu(hyp: Seq, refs: Sequence[Seq]) -> float:
    return max(sentence_bleu(hyp, r) for r in refs)


def oracle_bleu(samples: Sequence[Sequence[Seq]], refs: Sequence[Seq | Sequence[Seq]],
                multi_ref: bool = False) -> float:
    """Mean over inputs of the best sentence BLEU among that input's samples.

    With ``multi_ref`` each entry of ``refs`` is a list of references and a
    sample scores against its nearest one.
    """
    if len(samples) != len(refs):
        raise DagnatError(f"{len(samples)} sample sets but {len(refs)} references")
    if not samples:
        return 0.0
    best = []
    for cands, ref in zip(samples, refs):
        if multi_ref:
            best.append(max(multi_ref_sentence_bleu(c, ref) for c in cands))
        else:
            best.append(max(sentence_bleu(c, ref) for c in cands))
    return math.fsum(best) / len(best)


def oracle_bleu_curve(samples: Sequence[Seq], ref: Seq | Sequence[Seq], multi_ref: bool = False) -> list[float]:
    """Running best sentence BLEU over the first k samples, k = 1..K."""
    curve, best = [], 0.0
    for c in samples:
        s = multi_ref_sentence_bleu(c, ref) if multi_ref else sentence_bleu(c, ref)
        best = max(best, s)
        curve.append(best)
    return curve


def nearest_reference(hyp: Seq, refs: Sequence[Seq]) -> Seq:
    scores = [sentence_bleu(hyp, r) for r in refs]
    return refs[max(range(len(refs)), key=scores.__getitem__)]


def modality_metrics(outputs: Sequence[Seq], valid_targets: Sequence[Sequence[Seq]]) -> tuple[float, float]:
    """``(exact_valid_match_rate, multi_ref_bleu)``.

    The multi-reference BLEU pairs every output with its highest-scoring valid
    target and pools counts at corpus level.
    """
    if len(outputs) != len(valid_targets):
        raise DagnatError(f"{len(outputs)} outputs but {len(valid_targets)} target sets")
    if not outputs:
        return 0.0, 0.0
    hits = 0
    nearest = []
    for out, targets in zip(outputs, valid_targets):
        out_t = tuple(out)
        hits += any(out_t == tuple(t) for t in targets)
        nearest.append(nearest_reference(out, targets))
    return hits / len(outputs), corpus_bleu(outputs, nearest)
