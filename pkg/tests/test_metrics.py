import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visememl.metrics import EditCounts, corpus_counts, edit_distance, ver, wer
from visememl.viseme_map import EOS, PAD, SOS, SPACE


def brute_force_cost(ref, hyp):
    """Minimum over every edit script, enumerated without memoisation."""
    best = [None]

    def walk(i, j, cost):
        if i == len(ref) and j == len(hyp):
            if best[0] is None or cost < best[0]:
                best[0] = cost
            return
        if i < len(ref) and j < len(hyp):
            walk(i + 1, j + 1, cost + (ref[i] != hyp[j]))
        if i < len(ref):
            walk(i + 1, j, cost + 1)
        if j < len(hyp):
            walk(i, j + 1, cost + 1)

    walk(0, 0, 0)
    return best[0]


def test_single_substitution():
    assert edit_distance("ABC", "AXC") == EditCounts(1, 0, 0, 3)


def test_identity():
    assert edit_distance("ABC", "ABC") == EditCounts(0, 0, 0, 3)


def test_empty_cases():
    assert edit_distance("", "") == EditCounts(0, 0, 0, 0)
    assert edit_distance("", "AB") == EditCounts(0, 0, 2, 0)
    assert edit_distance("AB", "") == EditCounts(0, 2, 0, 2)
    assert corpus_counts([""], ["AB"]).rate == 2.0


def test_tie_break_prefers_substitution():
    # "AB" -> "BA": cost 2 via two substitutions or a deletion plus an insertion
    assert edit_distance("AB", "BA") == EditCounts(2, 0, 0, 2)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(40):
        a = rng.integers(0, 3, rng.integers(0, 7)).tolist()
        b = rng.integers(0, 3, rng.integers(0, 7)).tolist()
        assert edit_distance(a, b).errors == brute_force_cost(a, b)


seqs = st.lists(st.integers(0, 3), max_size=6)


@settings(max_examples=200, deadline=None)
@given(seqs)
def test_self_distance_zero(x):
    assert edit_distance(x, x).errors == 0


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_symmetry_and_count_balance(x, y):
    a, b = edit_distance(x, y), edit_distance(y, x)
    assert a.errors == b.errors
    assert a.deletions - a.insertions == len(x) - len(y)
    swapped = EditCounts(a.substitutions, a.insertions, a.deletions, len(y))
    assert swapped.errors == b.errors


@settings(max_examples=200, deadline=None)
@given(seqs, seqs, seqs)
def test_triangle(x, y, z):
    assert brute_force_cost(x, z) <= brute_force_cost(x, y) + brute_force_cost(y, z)
    assert edit_distance(x, z).errors <= edit_distance(x, y).errors + edit_distance(y, z).errors


def test_ver_cases():
    ref = [SOS, 1, 2, 3, EOS]
    assert ver([ref], [ref]) == 0.0
    assert ver([ref], [[SOS, 1, 9, 3, EOS]]) == pytest.approx(1 / 3)
    assert ver([ref], [[SOS, 1, 2, 3, 4, EOS, PAD]]) == pytest.approx(1 / 3)


def test_ver_scores_space_only():
    assert ver([[SOS, 1, SPACE, 2, EOS]], [[1, 2]]) == pytest.approx(1 / 3)


def test_ver_length_mismatch():
    with pytest.raises(ValueError):
        ver([[1]], [])


def test_wer_cases():
    assert wer(["thank you"], ["thank you"]) == 0.0
    assert wer(["thank you"], ["see you"]) == 0.5


def test_wer_is_count_ratio_not_mean_of_rates():
    refs = [["a"], ["b", "c", "d"]]
    hyps = [["x"], ["b", "c", "d"]]
    assert wer(refs, hyps) == pytest.approx(1 / 4)
    assert wer(refs, hyps) != pytest.approx((1 + 0) / 2)


def test_rate_can_exceed_one():
    assert wer([["a"]], [["x", "y", "z"]]) == 3.0
