import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_lattice
from dagnat.errors import (DegenerateRowError, InvalidLatticeError, InvalidPathError, OracleTooLargeError,
                           VocabError)
from dagnat.lattice import (ANCHORED, FREE, NEG, RESERVED, Lattice, Path, Vocabulary, brute_force_marginal,
                            build_transition_mask, dump_lattice, enumerate_paths, load_lattice,
                            normalize_lattice, path_joint_logprob, path_score_components)


def allowed(mask):
    return {(int(i), int(j)) for i, j in zip(*np.nonzero(mask))}


def test_mask_small_cases():
    assert allowed(build_transition_mask(3)) == {(0, 1), (0, 2), (1, 2)}
    assert allowed(build_transition_mask(2, FREE)) == {(0, 1)}
    assert build_transition_mask(6).sum() == sum(1 for i in range(6) for j in range(6) if j > i) == 15


def test_mask_rejects_short_lattice():
    with pytest.raises(InvalidLatticeError):
        build_transition_mask(1)
    with pytest.raises(InvalidLatticeError):
        build_transition_mask(4, "sideways")


def test_normalize_examples():
    lat = Lattice(np.zeros((2, 2)), np.zeros((2, 2)))
    norm = lat.normalized()
    np.testing.assert_allclose(norm.token_logprobs, np.log(0.5))
    assert norm.transition_logprobs[0, 1] == 0.0


def test_normalized_rows_sum_to_one(rng):
    lat = random_lattice(rng, 4, 5, scale=3.0)
    norm = normalize_lattice(lat)
    for i in range(3):
        row = norm.transition_logprobs[i][norm.mask[i]]
        assert abs(math.fsum(np.exp(row)) - 1.0) <= 1e-9
    np.testing.assert_allclose(np.exp(norm.token_logprobs).sum(axis=1), 1.0, atol=1e-12)
    assert (norm.transition_logprobs[~norm.mask] == NEG).all()


def test_degenerate_row():
    trans = np.zeros((3, 3))
    trans[1, 2] = -np.inf
    with pytest.raises(DegenerateRowError):
        Lattice(np.zeros((3, 2)), trans).normalized()


def test_lattice_validation():
    with pytest.raises(InvalidLatticeError):
        Lattice(np.zeros((1, 3)), np.zeros((1, 1)))
    with pytest.raises(InvalidLatticeError):
        Lattice(np.zeros((3, 3)), np.zeros((3, 2)))
    with pytest.raises(InvalidLatticeError):
        Lattice(np.full((2, 2), np.nan), np.zeros((2, 2)))


def test_lattice_is_immutable(rng):
    tok = rng.normal(size=(3, 2))
    lat = Lattice(tok, np.zeros((3, 3)))
    tok[0, 0] = 99.0
    assert lat.token_logits[0, 0] != 99.0
    with pytest.raises(ValueError):
        lat.token_logits[0, 0] = 1.0


def test_path_validation():
    with pytest.raises(InvalidPathError):
        Path((0, 2, 2))
    with pytest.raises(InvalidPathError):
        Path(())
    assert Path((0, 3, 5)).is_anchored(6)
    assert not Path((1, 5)).is_anchored(6)


def test_path_score_uses_exact_matrix_entries(rng):
    lat = random_lattice(rng, 10, 7)
    norm = lat.normalized()
    tokens = [3, 1, 4, 1]
    log_trans, log_emit = path_score_components(lat, (0, 1, 7, 9), tokens)
    E = np.exp(norm.transition_logprobs)
    assert log_trans == pytest.approx(math.log(E[0, 1] * E[1, 7] * E[7, 9]), abs=1e-12)
    expected = sum(norm.token_logprobs[p, t] for p, t in zip((0, 1, 7, 9), tokens))
    assert log_emit == pytest.approx(expected, abs=1e-12)


def test_single_node_path(rng):
    lat = random_lattice(rng, 4, 3)
    log_trans, log_emit = path_score_components(lat, (0,), [2])
    assert log_trans == 0.0
    assert log_emit == lat.normalized().token_logprobs[0, 2]


def test_path_joint_errors(rng):
    lat = random_lattice(rng, 4, 3)
    with pytest.raises(InvalidPathError):
        path_joint_logprob(lat, (0, 2, 1), [0, 0, 0])
    with pytest.raises(VocabError):
        path_joint_logprob(lat, (0, 3), [0, 3])
    with pytest.raises(InvalidPathError):
        path_joint_logprob(lat, (0, 4), [0, 1])


def test_shuffling_tokens_changes_only_emission(rng):
    lat = random_lattice(rng, 6, 5)
    path = (0, 2, 3, 5)
    t1, e1 = path_score_components(lat, path, [0, 1, 2, 3])
    t2, e2 = path_score_components(lat, path, [3, 2, 1, 0])
    assert t1 == t2
    assert e1 != e2


def test_enumeration_examples():
    assert len(enumerate_paths(6, 3, FREE)) == 20
    anchored = enumerate_paths(6, 3, ANCHORED)
    assert [p.indices for p in anchored] == [(0, 1, 5), (0, 2, 5), (0, 3, 5), (0, 4, 5)]
    assert [p.indices for p in enumerate_paths(5, 5, FREE)] == [(0, 1, 2, 3, 4)]
    assert [p.indices for p in enumerate_paths(5, 5, ANCHORED)] == [(0, 1, 2, 3, 4)]


def test_enumeration_cap():
    with pytest.raises(OracleTooLargeError):
        enumerate_paths(30, 15, FREE)
    with pytest.raises(InvalidPathError):
        enumerate_paths(3, 4, FREE)


@settings(max_examples=60, deadline=None)
@given(L=st.integers(1, 12), data=st.data())
def test_enumeration_counts_and_order(L, data):
    n = data.draw(st.integers(1, L))
    paths = enumerate_paths(L, n, FREE)
    assert len(paths) == math.comb(L, n)
    assert all(all(b > a for a, b in zip(p.indices, p.indices[1:])) for p in paths)
    assert [p.indices for p in paths] == sorted(p.indices for p in paths)


def test_brute_force_unique_path(rng):
    lat = random_lattice(rng, 4, 3)
    tokens = [0, 2, 1, 1]
    assert brute_force_marginal(lat, tokens) == pytest.approx(path_joint_logprob(lat, (0, 1, 2, 3), tokens))


def test_brute_force_uniform_closed_form():
    # Row-normalized uniform transitions: summing by hand over the 20 paths of L=6, n=3.
    L, n, V = 6, 3, 4
    lat = Lattice(np.zeros((L, V)), np.zeros((L, L)), FREE)
    total = 0.0
    for p in enumerate_paths(L, n, FREE):
        prob = V ** -n
        for a in p.indices[:-1]:
            prob *= 1.0 / (L - 1 - a)
        total += prob
    assert brute_force_marginal(lat, [1, 2, 3]) == pytest.approx(math.log(total), abs=1e-12)


def test_brute_force_unreachable_is_minus_inf(rng):
    lat = random_lattice(rng, 4, 3)
    assert brute_force_marginal(lat, [1]) == float("-inf")


def test_lattice_dump_round_trip(rng):
    lat = random_lattice(rng, 5, 4, dtype=np.float32)
    buf = io.BytesIO()
    dump_lattice(lat, buf)
    raw = buf.getvalue()
    assert raw[:4] == b"CLAT"
    assert len(raw) == 16 + 4 * (5 * 4 + 5 * 5)
    back = load_lattice(io.BytesIO(raw))
    assert back.token_logits.tobytes() == lat.token_logits.tobytes()
    assert back.transition_logits.tobytes() == lat.transition_logits.tobytes()
    with pytest.raises(InvalidLatticeError):
        load_lattice(io.BytesIO(b"XXXX" + raw[4:]))


def test_vocabulary_round_trip(tmp_path):
    vocab = Vocabulary(["a", "b", "c"])
    assert vocab.tokens[:4] == list(RESERVED)
    for tok in ("a", "b", "c"):
        assert vocab.surface(vocab.lookup(tok)) == tok
    assert vocab.lookup("zzz") == 3
    assert vocab.decode([1, 4, 5, 2]) == ["a", "b"]
    vocab.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == vocab
    (tmp_path / "bad.txt").write_text("x\ny\nz\nw\n")
    with pytest.raises(VocabError):
        Vocabulary.load(tmp_path / "bad.txt")
    with pytest.raises(VocabError):
        vocab.add("two words")
    with pytest.raises(VocabError):
        vocab.surface(99)
