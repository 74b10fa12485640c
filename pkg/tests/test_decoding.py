import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import exact_walk_distribution, random_lattice
from dagnat.decoding import (DecodeConfig, batch_sample, dedup, lookahead_decode, rescore, rescore_value,
                             sample_decode, top_p_filter, transition_sampling_probs)
from dagnat.lattice import EOS, NEG, Hypothesis, Lattice, Path


def chain_lattice():
    L, V = 3, 4
    tok = np.full((L, V), -5.0)
    tok[0, 1] = tok[1, 3] = 5.0
    tok[2, EOS] = 5.0
    trans = np.full((L, L), NEG)
    trans[0, 1], trans[0, 2], trans[1, 2] = 8.0, -8.0, 0.0
    return Lattice(tok, trans)


def test_lookahead_chain():
    h = lookahead_decode(chain_lattice())
    assert h.path.indices == (0, 1, 2)
    assert h.tokens == (1, 3, EOS)
    assert not h.truncated


def test_lookahead_tie_goes_to_lower_index():
    lat = Lattice(np.zeros((4, 5)), np.zeros((4, 4)))
    # all successors of row 0 tie after normalization; all token rows tie too
    assert lookahead_decode(lat).path.indices[:2] == (0, 1)


def test_lookahead_deterministic_and_truncation(rng):
    lat = random_lattice(rng, 6, 5)
    first = lookahead_decode(lat)
    assert all(lookahead_decode(lat) == first for _ in range(100))
    short = lookahead_decode(lat, max_step=2)
    assert len(short.tokens) <= 2
    assert short.truncated == (short.tokens[-1] != EOS)


def test_lookahead_components_reproduce_walk(rng):
    lat = random_lattice(rng, 7, 5)
    h = lookahead_decode(lat)
    norm = lat.normalized()
    idx = h.path.indices
    trans = sum(norm.transition_logprobs[a, b] for a, b in zip(idx, idx[1:]))
    emit = sum(norm.token_logprobs[p].max() for p in idx)
    assert h.log_transition == pytest.approx(trans, abs=1e-12)
    assert h.log_emission == pytest.approx(emit, abs=1e-12)
    assert rescore([h])[0] is h


def test_top_p_examples():
    row = np.log([0.5, 0.3, 0.15, 0.05])
    out = top_p_filter(row, 0.5)
    assert out[0] == pytest.approx(0.0, abs=1e-12)
    assert np.isneginf(out[1:]).all()
    np.testing.assert_allclose(top_p_filter(row, 1.0), row, atol=1e-12)
    uniform = top_p_filter(np.log(np.full(4, 0.25)), 0.5)
    assert np.isfinite(uniform).sum() == 2


def test_top_p_renormalizes(rng):
    for _ in range(50):
        logits = rng.normal(scale=3, size=8)
        row = logits - np.log(np.exp(logits).sum())
        out = top_p_filter(row, rng.uniform(0.05, 1.0))
        assert abs(np.exp(out).sum() - 1) <= 1e-6


def test_sampling_rows_are_distributions(rng):
    lat = random_lattice(rng, 6, 5)
    P = transition_sampling_probs(lat.normalized(), 0.7, 0.8)
    np.testing.assert_allclose(P[:-1].sum(axis=1), 1.0, atol=1e-12)
    assert (P[np.tril_indices(6)] == 0).all()


def test_sample_paths_are_valid(rng):
    lat = random_lattice(rng, 8, 5)
    cfg = DecodeConfig(temperature=1.0, top_p=1.0, sample_count=64)
    for h in batch_sample(lat, cfg, np.random.default_rng(0)) + [sample_decode(lat, cfg, rng)]:
        assert h.path.indices[0] == 0
        assert all(b > a for a, b in zip(h.path.indices, h.path.indices[1:]))


def test_cold_sampling_is_lookahead(rng):
    for _ in range(20):
        lat = random_lattice(rng, 8, 5, scale=2.0)
        cfg = DecodeConfig(temperature=1e-4, top_p=1.0, sample_count=8)
        greedy = lookahead_decode(lat)
        assert sample_decode(lat, cfg, rng).tokens == greedy.tokens
        assert {h.path for h in batch_sample(lat, cfg, rng)} == {greedy.path}


def test_fixed_seed_reproducible(rng):
    lat = random_lattice(rng, 8, 5)
    cfg = DecodeConfig(temperature=1.0, top_p=0.9, sample_count=16, seed=3)
    a = batch_sample(lat, cfg)
    b = batch_sample(lat, cfg)
    assert [h.path for h in a] == [h.path for h in b]
    assert sample_decode(lat, cfg) == sample_decode(lat, cfg)


def test_default_sample_count():
    lat = random_lattice(np.random.default_rng(0), 10, 6)
    assert len(batch_sample(lat, DecodeConfig())) == 128


def test_single_chain_matches_walk_distribution():
    rng = np.random.default_rng(5)
    tok = rng.normal(size=(4, 4))
    tok[:, EOS] = -10.0
    lat = Lattice(tok, rng.normal(size=(4, 4)))
    exact = exact_walk_distribution(lat, 1.0, 1.0)
    assert len(exact) == 4
    cfg = DecodeConfig(temperature=1.0, top_p=1.0, sample_count=1)
    gen = np.random.default_rng(11)
    trials = 100_000
    counts = Counter()
    for _ in range(trials // 1000):
        cfg_k = DecodeConfig(temperature=1.0, top_p=1.0, sample_count=1000)
        counts.update(h.path.indices for h in batch_sample(lat, cfg_k, gen))
    keys = sorted(exact)
    observed = [counts[k] for k in keys]
    expected = [exact[k] * trials for k in keys]
    assert chisquare(observed, expected).pvalue > 0.01
    assert sample_decode(lat, cfg, gen).path.indices in exact


def hyp(tokens, log_trans, log_emit):
    return Hypothesis(tuple(tokens), Path(tuple(range(len(tokens)))), log_trans, log_emit)


def test_rescore_extremes_and_stability():
    a, b = hyp([1, 2], -1.0, -3.0), hyp([3, 4], -3.0, -1.0)
    assert rescore([a, b], beta=1.0) == [b, a]
    assert rescore([a, b], beta=0.0) == [a, b]
    assert rescore([a, b], beta=0.5) == [a, b]
    assert rescore([b, a], beta=0.5) == [b, a]
    assert rescore_value(a, 0.5) == pytest.approx(-1.0)


def test_dedup():
    same = [hyp([1, 2], -float(i), -1.0) for i in range(4)]
    assert dedup(same) == [same[0]]
    distinct = [hyp([i, 2], -1.0, -1.0) for i in range(4)]
    assert dedup(distinct) == distinct
    worse = Hypothesis((1, 2), Path((0, 3)), -2.0, -2.0)
    better = Hypothesis((1, 2), Path((0, 1)), -0.5, -0.5)
    out = dedup([worse, hyp([5, 6], 0.0, 0.0), better])
    assert out[0] is better and len(out) == 2
    assert math.isclose(rescore_value(out[0], 0.5), max(rescore_value(worse, 0.5), rescore_value(better, 0.5)))


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(temperature=0)
    with pytest.raises(ValueError):
        DecodeConfig(top_p=0)
    with pytest.raises(ValueError):
        DecodeConfig(sample_count=0)
    with pytest.raises(ValueError):
        DecodeConfig(beta=1.5)
