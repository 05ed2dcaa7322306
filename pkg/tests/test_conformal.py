import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftree.conformal import (
    ABSOLUTE_RESIDUAL,
    COMPLEMENT_PROBABILITY,
    ConformalRule,
    calibrate_conformal_tree,
    complement_probability_scores,
    coverage_bounds,
    delta_bound,
    delta_interpretable,
    full_conformal_band,
    leaf_rank,
    leaf_threshold,
    make_set,
    naive_set,
    naive_uq_set,
    normalize_probabilities,
    predict_set,
    predict_set_refit,
    split_conformal_threshold,
)
from conftree.dyadic_tree import ROOT, NodeId, TreeConfig, partitions_equal
from conftree.errors import ConformalTreeError, LeafTooSmallError
from oracles import decimal_rank, delta_exact, one_leaf_threshold, scan_threshold

alphas = st.sampled_from([0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.5, 0.7, 0.9])
score_lists = st.lists(st.floats(0, 100, allow_nan=False), min_size=3, max_size=60)


# --- leaf thresholds ----------------------------------------------------------


@pytest.mark.parametrize("count, alpha, rank", [(20, 0.1, 18), (3, 0.5, 2), (10, 0.01, 9)])
def test_leaf_rank_examples(count, alpha, rank):
    assert leaf_rank(alpha, count) == rank


def test_leaf_threshold_examples():
    scores = np.arange(20.0)[::-1]
    assert leaf_threshold(scores, 0.1) == 17.0
    assert leaf_threshold([5.0, 1.0, 3.0], 0.5) == 3.0
    assert leaf_threshold(np.arange(10.0), 0.01) == 8.0


@settings(max_examples=200, deadline=None)
@given(score_lists, alphas)
def test_leaf_threshold_matches_scan_oracle(scores, alpha):
    assert leaf_threshold(scores, alpha) == scan_threshold(scores, alpha)
    assert leaf_rank(alpha, len(scores)) == decimal_rank(alpha, len(scores))


def test_leaf_too_small():
    with pytest.raises(LeafTooSmallError, match="leaf too small"):
        leaf_threshold([1.0, 2.0], 0.1)


def test_invalid_alpha():
    for alpha in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConformalTreeError):
            leaf_threshold([1.0, 2.0, 3.0], alpha)


@settings(max_examples=100, deadline=None)
@given(score_lists, alphas, alphas, st.randoms(use_true_random=False))
def test_threshold_monotone_and_permutation_invariant(scores, a, b, rnd):
    lo, hi = sorted((a, b))
    assert leaf_threshold(scores, hi) <= leaf_threshold(scores, lo)
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    assert leaf_threshold(shuffled, a) == leaf_threshold(scores, a)


def test_vacuous_never_when_alpha_at_least_one_over_m_minus_one():
    for m_k in range(3, 301):
        for alpha in np.linspace(1.0 / (m_k - 1), 0.99, 25):
            assert leaf_rank(float(alpha), m_k) <= m_k


def test_split_conformal_threshold():
    scores = np.arange(1.0, 11.0)
    assert split_conformal_threshold(scores, 0.1) == 10.0  # rank ceil(11 * 0.9) = 10
    assert split_conformal_threshold(scores, 0.5) == 6.0  # rank ceil(5.5) = 6
    assert math.isinf(split_conformal_threshold(np.arange(5.0), 0.1))  # rank 6 > 5


# --- delta and coverage bounds --------------------------------------------------


def test_delta_small_case():
    assert delta_bound(3, 2, validate=False) == pytest.approx(1.375, rel=1e-14)
    assert delta_exact(3, 2) == Fraction(11, 8)


def test_delta_validation():
    for n, m in [(10, 11), (10, 2)]:
        with pytest.raises(ConformalTreeError):
            delta_bound(n, m)


def test_delta_matches_exact_oracle():
    assert abs(Fraction(delta_bound(499, 20)) - delta_exact(499, 20)) / delta_exact(499, 20) <= 1e-10


def test_interpretable_bound_dominates_exact():
    for n in (19, 20, 49, 99, 150, 199, 499, 999):
        step = 1 if n < 200 else 7
        for m in range(3, n + 1, step):
            assert Fraction(delta_interpretable(n, m)) >= delta_exact(n, m), (n, m)


def test_coverage_bounds_values_and_clamping():
    b = coverage_bounds(500, 20, 0.1)
    d = delta_bound(500, 20)
    assert b.lower == pytest.approx(0.9 - d)
    assert b.upper == pytest.approx(min(1.0, 0.9 + 1 / 18 + d))
    assert b.refit_lower == pytest.approx(0.8)
    assert b.refit_upper == 1.0  # 0.9 + 1/18 + 0.1 clamps
    assert b.refit_upper_raw == pytest.approx(0.9 + 1 / 18 + 0.1)
    tiny = coverage_bounds(5, 3, 0.1)
    assert tiny.lower_raw < 0 and tiny.lower == 0.0 and tiny.upper == 1.0


# --- prediction sets ----------------------------------------------------------


def test_regression_set_example():
    ps = make_set(ABSOLUTE_RESIDUAL, 0.5, 2.0)
    assert (ps.lower, ps.upper) == (1.5, 2.5)
    assert 2.5 in ps and 2.6 not in ps


def test_classification_set_examples():
    f = [0.7, 0.25, 0.05]
    assert make_set(COMPLEMENT_PROBABILITY, 0.4, f).labels == (0,)
    assert make_set(COMPLEMENT_PROBABILITY, 0.75, f).labels == (0, 1)
    empty = make_set(COMPLEMENT_PROBABILITY, 0.0, f)
    assert empty.labels == () and empty.empty
    assert make_set(COMPLEMENT_PROBABILITY, 0.0, [1.0, 0.0, 0.0]).labels == (0,)


def test_classification_set_includes_ties():
    # f_k == 1 - S* exactly, also when 1 - S* is not representable
    assert make_set(COMPLEMENT_PROBABILITY, 1.0 - 0.3, [0.3, 0.7]).labels == (0, 1)


def test_vacuous_regression_set():
    ps = make_set(ABSOLUTE_RESIDUAL, math.inf, 1.0)
    assert ps.vacuous and ps.lower == -math.inf and ps.upper == math.inf


def test_probability_tolerances():
    p = np.array([0.5, 0.499999])
    fixed = normalize_probabilities(p)
    assert fixed.sum() == pytest.approx(1.0, abs=1e-15)
    exact = np.array([0.2, 0.3, 0.5])
    assert np.array_equal(normalize_probabilities(exact), exact)
    with pytest.raises(ConformalTreeError):
        normalize_probabilities([0.5, 0.49])
    with pytest.raises(ConformalTreeError):
        normalize_probabilities([1.2, -0.2])


def test_complement_scores():
    s = complement_probability_scores([[0.7, 0.3], [0.1, 0.9]], [0, 0])
    assert np.allclose(s, [0.3, 0.9])


# --- calibration ----------------------------------------------------------------


def _regression_problem(seed, n=400, d=2):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, d))
    s = np.abs(rng.normal(size=n)) * (0.2 + 2 * x[:, 0])
    return x, s


def test_rule_invariants():
    x, s = _regression_problem(0)
    rule = calibrate_conformal_tree(x, s, TreeConfig(20, 8), 0.1)
    assert sum(rule.leaf_counts.values()) == len(s)
    assert min(rule.leaf_counts.values()) >= 20
    where = rule.tree.assign(x)
    for i, node in enumerate(rule.tree.leaves):
        leaf_scores = s[where == i]
        assert rule.leaf_thresholds[node] == one_leaf_threshold(leaf_scores, 0.1)
    assert rule.delta == delta_bound(400, 20)


def test_one_leaf_rule_is_split_conformal_with_modified_rank():
    x, s = _regression_problem(1, n=97)
    rule = calibrate_conformal_tree(x, s, TreeConfig(5, 1), 0.1)
    assert rule.tree.leaves == (ROOT,)
    expected = one_leaf_threshold(s, 0.1)
    for q in np.random.default_rng(2).uniform(size=(20, 2)):
        ps = predict_set(rule, q, 3.0)
        assert ps.threshold == expected
        assert (ps.lower, ps.upper) == (3.0 - expected, 3.0 + expected)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 50), alphas)
def test_shift_equivariance(seed, c, alpha):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(120, 2))
    s = rng.integers(0, 40, size=120).astype(float)  # integers keep ranges exact
    config = TreeConfig(8, 6)
    a = calibrate_conformal_tree(x, s, config, alpha)
    b = calibrate_conformal_tree(x, s + c, config, alpha)
    assert partitions_equal(a.tree, b.tree)
    for node in a.tree.leaves:
        assert b.leaf_thresholds[node] == a.leaf_thresholds[node] + c
    q = rng.uniform(size=2)
    assert predict_set(b, q, 0.0).size == predict_set(a, q, 0.0).size + 2 * c


def test_rule_json_round_trip():
    x, s = _regression_problem(4)
    rule = calibrate_conformal_tree(x, s, TreeConfig(20, 8), 0.1)
    rule.leaf_thresholds[rule.tree.leaves[0]] = math.inf
    text = rule.to_json()
    assert '"inf"' in text
    back = ConformalRule.from_json(text)
    assert back.leaf_thresholds == rule.leaf_thresholds
    assert back.leaf_counts == rule.leaf_counts
    assert partitions_equal(back.tree, rule.tree)
    assert (back.alpha, back.delta, back.mode, back.n) == (rule.alpha, rule.delta, rule.mode, rule.n)


def test_predict_rejects_out_of_domain():
    x, s = _regression_problem(5)
    rule = calibrate_conformal_tree(x, s, TreeConfig(20, 8), 0.1)
    with pytest.raises(ConformalTreeError):
        predict_set(rule, [1.5, 0.2], 0.0)


# --- refit variant ----------------------------------------------------------------


def test_refit_identical_when_candidacy_unaffected():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(400, 1))
    s = np.where(x[:, 0] < 0.5, 0.1, 1.0) * rng.uniform(size=400)
    config = TreeConfig(20, 4)
    rule = calibrate_conformal_tree(x, s, config, 0.1)
    for q in rng.uniform(size=(30, 1)):
        shared = predict_set(rule, q, 0.0)
        refit = predict_set_refit(x, s, config, 0.1, q, 0.0)
        assert (refit.leaf, refit.threshold) == (shared.leaf, shared.threshold)


def test_refit_differs_on_m_minus_one_instance():
    m = 5
    x = np.array([0.1, 0.15, 0.2, 0.3, 0.6, 0.65, 0.7, 0.8, 0.9])
    s = np.array([0.0, 0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 10.0, 10.0])
    config = TreeConfig(m, 2)
    shared = predict_set(calibrate_conformal_tree(x, s, config, 0.1), [0.25], 0.0)
    refit = predict_set_refit(x, s, config, 0.1, [0.25], 0.0)
    assert shared.leaf == ROOT and shared.threshold == 10.0
    assert refit.leaf == NodeId(1, 0) and refit.threshold == 0.0


def test_refit_with_one_leaf_matches_shared():
    x, s = _regression_problem(7, n=60)
    config = TreeConfig(5, 1)
    rule = calibrate_conformal_tree(x, s, config, 0.2)
    for q in np.random.default_rng(8).uniform(size=(10, 2)):
        refit, shared = predict_set_refit(x, s, config, 0.2, q, 1.0), predict_set(rule, q, 1.0)
        assert (refit.leaf, refit.lower, refit.upper) == (shared.leaf, shared.lower, shared.upper)


# --- full conformal -------------------------------------------------------------


def test_full_conformal_noiseless_step_has_zero_width():
    x = np.linspace(0.0, 0.999, 64)
    y = np.where(x < 0.5, -2.0, 3.0)
    band = full_conformal_band(x, y, TreeConfig(5, 4), 0.1)
    assert band.threshold == 0.0
    assert band.band([0.2]) == (-2.0, -2.0)


def test_full_conformal_residual_bound():
    rng = np.random.default_rng(9)
    x = rng.uniform(size=80)
    y = np.sin(8 * x) + rng.normal(0, 0.3, 80)
    band = full_conformal_band(x, y, TreeConfig(8, 4), 0.1)
    where = band.tree.assign(x[:, None])
    half_ranges = [np.ptp(y[where == i]) / 2 for i in range(len(band.tree.leaves))]
    assert band.scores.max() <= max(half_ranges) + 1e-12


# --- naive self-reported sets -------------------------------------------------------


def test_naive_examples():
    assert naive_set([1.0, 0.0, 0.0], 0.1) == {0}
    assert naive_set([0.25] * 4, 0.2) == {0, 1, 2, 3}
    assert naive_set([0.5, 0.3, 0.2], 0.2) == {0, 1}
    # ties at the cut are included
    assert naive_set([0.4, 0.3, 0.3], 0.35) == {0, 1, 2}


def test_naive_majority_vote():
    samples = [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.5, 0.5]]
    # individual sets {0,1}, {1}, {1,2}
    assert naive_uq_set(samples, 0.1) == {1}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), alphas)
def test_naive_set_is_smallest_covering_superlevel_set(weights, alpha):
    q = np.array(weights) / np.sum(weights)
    assume(abs(q.sum() - 1) < 1e-12)
    chosen = naive_set(q, alpha)
    assert q[list(chosen)].sum() >= 1 - alpha - 1e-9
    tau = min(q[list(chosen)])
    assert chosen == {k for k in range(len(q)) if q[k] >= tau}
    smaller = [k for k in range(len(q)) if q[k] > tau]
    assert q[smaller].sum() < 1 - alpha + 1e-9
