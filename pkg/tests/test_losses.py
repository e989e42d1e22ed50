import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visememl import autodiff as ad
from visememl.losses import (
    EmptyTargetWarning, LossConfig, RepresentativeSet, build_target, cross_entropy,
    kl_seq, loss_kl, loss_within, loss_wkl, representative_distributions,
    total_loss, weighted_target,
)

C = 17


def random_simplex(rng, shape, scale=1.0):
    z = rng.normal(scale=scale, size=shape)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# independent oracles -------------------------------------------------------

def naive_reps(q, y, n_classes, exclude=(13, 14, 15, 16)):
    reps, present = [], []
    for c in range(n_classes):
        acc = [0.0] * n_classes
        m = 0
        for l in range(len(y)):
            if y[l] == c and c not in exclude:
                for k in range(n_classes):
                    acc[k] = acc[k] + float(q[l][k])
                m += 1
        present.append(m > 0)
        reps.append([a / m for a in acc] if m else [0.0] * n_classes)
    return np.array(reps), np.array(present)


def naive_kl(P, Q, eps=1e-12):
    total = 0.0
    for l in range(len(P)):
        for c in range(len(P[l])):
            p = float(P[l][c])
            if p > 0:
                total += p * (math.log(p) - math.log(max(float(Q[l][c]), eps)))
    return total / len(P)


def naive_aligned_kl(target_reps, target_present, q, y, exclude=(13, 14, 15, 16)):
    rows_p, rows_q = [], []
    for l in range(len(y)):
        if y[l] in exclude or not target_present[y[l]]:
            continue
        rows_p.append(target_reps[y[l]])
        rows_q.append(q[l])
    return naive_kl(rows_p, rows_q) if rows_p else 0.0


# representative distributions ---------------------------------------------

def test_reps_arithmetic_mean():
    S = representative_distributions(np.array([[0.6, 0.4], [0.4, 0.6]]), [1, 1])
    np.testing.assert_allclose(S.reps[1], [0.5, 0.5])
    assert S.present.tolist() == [False, True] and S.counts.tolist() == [0, 2]


def test_reps_single_row_exact():
    q = np.array([[0.3, 0.7]])
    S = representative_distributions(q, [0])
    assert np.array_equal(S.reps[0], q[0])


def test_reps_length_mismatch():
    with pytest.raises(ValueError):
        representative_distributions(np.ones((3, 2)) / 2, [0, 1])


@pytest.mark.parametrize("seed", range(10))
def test_reps_bitwise_equal_to_brute_force(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 40))
    q = random_simplex(rng, (L, C))
    y = rng.integers(0, C, size=L)
    S = representative_distributions(q, y)
    reps, present = naive_reps(q, y, C)
    assert np.array_equal(S.present, present)
    assert np.array_equal(S.reps, reps)


def test_reps_batched_matches_flat():
    rng = np.random.default_rng(3)
    q = random_simplex(rng, (4, 6, C))
    y = rng.integers(0, C, size=(4, 6))
    a = representative_distributions(q, y)
    b = representative_distributions(q.reshape(-1, C), y.reshape(-1))
    assert np.array_equal(a.reps, b.reps)


def test_special_tokens_excluded():
    q = np.full((2, C), 1 / C)
    S = representative_distributions(q, [13, 16])
    assert not S.present.any()


# targets -------------------------------------------------------------------

def test_build_target_allocates_rep():
    reps = np.zeros((C, C))
    d = random_simplex(np.random.default_rng(0), (C,))
    reps[8] = d
    present = np.zeros(C, bool)
    present[8] = True
    S = RepresentativeSet(reps, present, present.astype(int))
    assert np.array_equal(build_target(S, [8]), d[None])
    P = build_target(S, [8, 8, 8])
    assert all(np.array_equal(row, d) for row in P)
    with pytest.raises(ValueError):
        build_target(S, [8, 3])


# kl ------------------------------------------------------------------------

def test_kl_identity():
    q = random_simplex(np.random.default_rng(1), (5, C))
    assert kl_seq(q, q).item() == pytest.approx(0.0, abs=1e-15)


def test_kl_hand_values():
    assert kl_seq([[1.0, 0.0]], [[0.5, 0.5]]).item() == pytest.approx(math.log(2), abs=1e-12)
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert expected == pytest.approx(0.143841, abs=1e-6)
    assert kl_seq([[0.5, 0.5]], [[0.25, 0.75]]).item() == pytest.approx(expected, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        kl_seq(np.ones((2, 3)) / 3, np.ones((3, 3)) / 3)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(200):
        p = random_simplex(rng, (1, C), scale=3)
        q = random_simplex(rng, (1, C), scale=3)
        v = kl_seq(p, q).item()
        assert v >= 0
        assert v == pytest.approx(naive_kl(p, q), rel=1e-10, abs=1e-14)


# single KL -----------------------------------------------------------------

def test_loss_kl_zero_when_matching_normal_reps():
    rng = np.random.default_rng(2)
    qn = random_simplex(rng, (6, C))
    yn = np.array([0, 1, 2, 0, 1, 2])
    S_N = representative_distributions(qn, yn)
    ys = np.array([2, 1, 0])
    assert loss_kl(S_N.reps[ys], ys, S_N).item() == pytest.approx(0.0, abs=1e-14)


def test_loss_kl_all_absent_warns():
    S_N = representative_distributions(np.full((1, C), 1 / C), [0])
    with pytest.warns(EmptyTargetWarning):
        v = loss_kl(np.full((2, C), 1 / C), [5, 6], S_N)
    assert v.item() == 0.0


def test_loss_kl_single_position():
    S_N = representative_distributions(np.array([[1.0, 0.0]]), [0])
    assert loss_kl(np.array([[0.5, 0.5]]), [0], S_N).item() == pytest.approx(math.log(2))


# weighted target -----------------------------------------------------------

def _single(row):
    row = np.asarray(row, float)
    reps = np.zeros((len(row), len(row)))
    reps[0] = row
    present = np.zeros(len(row), bool)
    present[0] = True
    return RepresentativeSet(reps, present, present.astype(int))


def test_weighted_target_convex():
    M = weighted_target(_single([1, 0]), _single([0, 1]), 3, 1)
    np.testing.assert_allclose(M.reps[0], [0.75, 0.25])


def test_weighted_target_midpoint():
    a, b = [0.2, 0.8], [0.6, 0.4]
    M = weighted_target(_single(a), _single(b), 5, 5)
    np.testing.assert_allclose(M.reps[0], [0.4, 0.6])


def test_weighted_target_limit():
    rng = np.random.default_rng(0)
    S_N = representative_distributions(random_simplex(rng, (13, C)), np.arange(13))
    S_S = representative_distributions(random_simplex(rng, (13, C)), np.arange(13))
    M = weighted_target(S_N, S_S, 10**9, 1)
    assert np.max(np.abs(M.reps - S_N.reps)) < 1e-8


def test_weighted_target_zero_silent_is_exact():
    rng = np.random.default_rng(1)
    S_N = representative_distributions(random_simplex(rng, (13, C)), np.arange(13))
    S_S = representative_distributions(random_simplex(rng, (13, C)), np.arange(13))
    M = weighted_target(S_N, S_S, 7, 0)
    assert np.array_equal(M.reps, S_N.reps)


def test_weighted_target_one_sided_class():
    S_N = representative_distributions(np.array([[0.9, 0.1]]), [0])
    S_S = representative_distributions(np.array([[0.2, 0.8]]), [1])
    M = weighted_target(S_N, S_S, 1, 1)
    assert M.present.tolist() == [True, True]
    np.testing.assert_array_equal(M.reps, [[0.9, 0.1], [0.2, 0.8]])


def test_weighted_target_rejects_zero_counts():
    with pytest.raises(ValueError):
        weighted_target(_single([1, 0]), _single([0, 1]), 0, 0)


# WKL -----------------------------------------------------------------------

def test_wkl_zero_when_aligned():
    rng = np.random.default_rng(4)
    y = np.array([0, 1, 2])
    M = representative_distributions(random_simplex(rng, (3, C)), y)
    assert loss_wkl(M.reps[y], y, M.reps[y], y, M).item() == pytest.approx(0, abs=1e-14)


def test_wkl_additivity():
    rng = np.random.default_rng(5)
    y = np.array([0, 1, 2])
    M = representative_distributions(random_simplex(rng, (3, C)), y)
    qs = random_simplex(rng, (3, C))
    v = loss_wkl(M.reps[y], y, qs, y, M).item()
    assert v == pytest.approx(kl_seq(M.reps[y], qs).item(), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_wkl_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    qn, qs = random_simplex(rng, (6, C)), random_simplex(rng, (5, C))
    yn, ys = rng.integers(0, C, 6), rng.integers(0, C, 5)
    rn, pn = naive_reps(qn, yn, C)
    rs, ps = naive_reps(qs, ys, C)
    wn, ws = 30 / 40, 10 / 40
    mreps = np.zeros((C, C))
    for c in range(C):
        if pn[c] and ps[c]:
            mreps[c] = [wn * rn[c][k] + ws * rs[c][k] for k in range(C)]
        elif pn[c]:
            mreps[c] = rn[c]
        elif ps[c]:
            mreps[c] = rs[c]
    mp = pn | ps
    expected = naive_aligned_kl(mreps, mp, qn, yn) + naive_aligned_kl(mreps, mp, qs, ys)
    M = weighted_target(representative_distributions(qn, yn), representative_distributions(qs, ys), 30, 10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTargetWarning)
        assert loss_wkl(qn, yn, qs, ys, M).item() == pytest.approx(expected, rel=1e-10, abs=1e-14)


# within --------------------------------------------------------------------

def test_within_zero_for_identical_rows():
    q = np.array([[0.2, 0.8], [0.7, 0.3], [0.2, 0.8]])
    assert loss_within(q, [0, 1, 0]).item() == pytest.approx(0, abs=1e-15)


def test_within_opposite_one_hots():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    # KL([.5,.5] || [1,0]) with the zero clamped to 1e-12; both positions are symmetric
    one = 0.5 * math.log(0.5 / 1.0) + 0.5 * math.log(0.5 / 1e-12)
    v = loss_within(q, [0, 0]).item()
    assert math.isfinite(v) and v > 0
    assert v == pytest.approx(one, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_within_permutation_invariant(seed, L):
    rng = np.random.default_rng(seed)
    q = random_simplex(rng, (L, C))
    y = rng.integers(0, 13, L)
    perm = rng.permutation(L)
    assert loss_within(q[perm], y[perm]).item() == pytest.approx(loss_within(q, y).item(), rel=1e-12, abs=1e-15)


# cross-entropy ---------------------------------------------------------------

def test_ce_one_hot():
    y = np.array([3, 0, 16])
    assert cross_entropy(np.eye(C)[y], y).item() == 0.0


def test_ce_uniform():
    v = cross_entropy(np.full((4, C), 1 / C), [0, 5, 13, 16]).item()
    assert v == pytest.approx(math.log(17), abs=1e-12)
    assert math.log(17) == pytest.approx(2.8332, abs=1e-4)


def test_ce_monotone_in_true_probability():
    vals = []
    for p in (0.9, 0.7, 0.5, 0.1):
        vals.append(cross_entropy(np.array([[p, 1 - p]]), [0]).item())
    assert vals == sorted(vals) and len(set(vals)) == 4


# config and total ------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(frozenset({"KL"}))
    with pytest.raises(ValueError):
        LossConfig(frozenset({"NCE", "KL", "WKL"}))
    with pytest.raises(ValueError):
        LossConfig(frozenset({"NCE"}), weights={"NCE": 0})
    with pytest.raises(ValueError):
        LossConfig(frozenset({"NCE", "XX"}))
    assert LossConfig.parse("nce+sce+wkl").label == "NCE+SCE+WKL"


def _batches(seed, L=5):
    rng = np.random.default_rng(seed)
    qn, qs = random_simplex(rng, (L, C)), random_simplex(rng, (L, C))
    yn, ys = rng.integers(0, 14, L), rng.integers(0, 14, L)
    return (qn, yn), (qs, ys)


def test_total_nce_only():
    bn, bs = _batches(0)
    total, br = total_loss(bn, None, LossConfig(frozenset({"NCE"})))
    assert total.item() == cross_entropy(*bn).item()
    assert list(br) == ["NCE"]


def test_total_baseline():
    bn, bs = _batches(1)
    total, _ = total_loss(bn, bs, LossConfig())
    assert total.item() == pytest.approx(cross_entropy(*bn).item() + cross_entropy(*bs).item(), rel=1e-14)


def test_total_is_weighted_sum_of_terms():
    bn, bs = _batches(2)
    w = {"NCE": 1.0, "SCE": 2.0, "WKL": 0.5, "NKL": 0.25, "SKL": 3.0}
    cfg = LossConfig(frozenset(w), weights=w, n_normal=40, n_silent=10)
    total, br = total_loss(bn, bs, cfg)
    S_N = representative_distributions(*bn)
    S_S = representative_distributions(*bs)
    M = weighted_target(S_N, S_S, 40, 10)
    parts = {
        "NCE": cross_entropy(*bn).item(), "SCE": cross_entropy(*bs).item(),
        "WKL": loss_wkl(*bn, *bs, M).item(), "NKL": loss_within(*bn).item(),
        "SKL": loss_within(*bs).item(),
    }
    assert total.item() == pytest.approx(sum(w[k] * parts[k] for k in w), rel=1e-12)
    for k in w:
        assert br[k].value == pytest.approx(parts[k], rel=1e-12) and br[k].weight == w[k]


def test_total_kl_term_counts_skipped():
    qn = np.full((2, C), 1 / C)
    qs = np.full((3, C), 1 / C)
    cfg = LossConfig(frozenset({"NCE", "SCE", "KL"}))
    _, br = total_loss((qn, [0, 1]), (qs, [0, 5, 13]), cfg)
    assert br["KL"].skipped == 1


def test_total_missing_batch():
    bn, _ = _batches(3)
    with pytest.raises(ValueError):
        total_loss(bn, None, LossConfig())
