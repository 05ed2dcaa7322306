"""Conformity scores, per-leaf calibration and prediction sets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .dyadic_tree import (
    DyadicTree,
    NodeId,
    TreeConfig,
    _check_points,
    _check_scores,
    fit_robust_tree,
    fit_robust_tree_with_test_point,
    leaf_midranges,
)
from .errors import ConformalTreeError, LeafTooSmallError

ABSOLUTE_RESIDUAL = "absolute_residual"
COMPLEMENT_PROBABILITY = "complement_probability"
SCORE_KINDS = (ABSOLUTE_RESIDUAL, COMPLEMENT_PROBABILITY)

SHARED_TREE = "shared_tree"
REFIT_PER_QUERY = "refit_per_query"

PROB_SUM_ACCEPT = 1e-9
PROB_SUM_RENORMALIZE = 1e-6


# --- scores -----------------------------------------------------------------


def absolute_residual_scores(y, mu) -> np.ndarray:
    return np.abs(np.asarray(y, dtype=float) - np.asarray(mu, dtype=float))


def normalize_probabilities(p) -> np.ndarray:
    """Check rows of ``p`` lie on the simplex.

    Sums within 1e-9 of one are accepted unchanged, sums within 1e-6 are
    renormalized, anything further off raises.
    """
    p = np.array(p, dtype=float, copy=True)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ConformalTreeError("probabilities must be finite and nonnegative")
    sums = p.sum(axis=1)
    dev = np.abs(sums - 1.0)
    bad = np.flatnonzero(dev > PROB_SUM_RENORMALIZE)
    if bad.size:
        raise ConformalTreeError(
            f"probability vector {int(bad[0])} sums to {sums[bad[0]]!r}, not 1"
        )
    fix = dev > PROB_SUM_ACCEPT
    p[fix] /= sums[fix, None]
    return p[0] if single else p


def complement_probability_scores(probs, labels) -> np.ndarray:
    probs = normalize_probabilities(np.atleast_2d(probs))
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(probs),):
        raise ConformalTreeError("need one label per probability vector")
    if np.any((labels < 0) | (labels >= probs.shape[1])):
        raise ConformalTreeError("label index out of range")
    return 1.0 - probs[np.arange(len(probs)), labels]


# --- order statistics -------------------------------------------------------


def _exact(alpha: float) -> Fraction:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConformalTreeError("alpha must lie in (0, 1)")
    # decimal reading of alpha, so that e.g. 0.1 * 18 is exactly 1.8
    return Fraction(repr(alpha))


def _ceil(q: Fraction) -> int:
    return -((-q.numerator) // q.denominator)


def leaf_rank(alpha: float, count: int) -> int:
    """1-based rank ``ceil((1 - alpha) * (count - 2) + 1)`` used inside a leaf."""
    return _ceil((1 - _exact(alpha)) * (count - 2) + 1)


def split_conformal_rank(alpha: float, n: int) -> int:
    """1-based rank ``ceil((n + 1) * (1 - alpha))`` of standard split conformal."""
    return _ceil((n + 1) * (1 - _exact(alpha)))


def _kth_smallest(scores: np.ndarray, r: int) -> float:
    if r > scores.size:
        return math.inf
    return float(np.sort(scores)[r - 1])


def leaf_threshold(scores, alpha: float) -> float:
    """Calibrated score threshold for one leaf; ``inf`` when the rank exceeds the leaf size."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.size < 3:
        raise LeafTooSmallError("leaf too small")
    return _kth_smallest(scores, leaf_rank(alpha, scores.size))


def split_conformal_threshold(scores, alpha: float) -> float:
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if scores.size < 1:
        raise ConformalTreeError("no calibration scores")
    return _kth_smallest(scores, split_conformal_rank(alpha, scores.size))


# --- theoretical bounds -----------------------------------------------------


def delta_bound(n: int, m: int, validate: bool = True) -> float:
    """Probability bound on a partition change when one point is added.

    ``2/m + C(n+1, m) (m/(n+1))^m (1 - m/(n+1))^(n+1-m)``, evaluated in log
    space. The raw (possibly > 1) value is returned.
    """
    n, m = int(n), int(m)
    if validate and not 3 <= m <= n:
        raise ConformalTreeError(f"need 3 <= m <= n, got n={n}, m={m}")
    if not 1 <= m <= n:
        raise ConformalTreeError(f"need 1 <= m <= n, got n={n}, m={m}")
    N = n + 1
    log_pmf = math.lgamma(N + 1) - math.lgamma(m + 1) - math.lgamma(N - m + 1)
    log_pmf += m * math.log(m / N) + (N - m) * math.log1p(-m / N)
    return 2.0 / m + math.exp(log_pmf)


def delta_interpretable(n: int, m: int) -> float:
    """Stirling-type upper bound ``2/m + e / (2 pi sqrt(c (1-c) (n+1)))`` with ``c = m/(n+1)``."""
    n, m = int(n), int(m)
    if not 1 <= m <= n:
        raise ConformalTreeError(f"need 1 <= m <= n, got n={n}, m={m}")
    c = m / (n + 1)
    return 2.0 / m + math.e / (2 * math.pi * math.sqrt(c * (1 - c) * (n + 1)))


def _clamp(v: float) -> float:
    return min(1.0, max(0.0, v))


@dataclass(frozen=True)
class CoverageBounds:
    alpha: float
    delta: float
    lower_raw: float
    upper_raw: float
    refit_lower_raw: float
    refit_upper_raw: float

    @property
    def lower(self) -> float:
        return _clamp(self.lower_raw)

    @property
    def upper(self) -> float:
        return _clamp(self.upper_raw)

    @property
    def refit_lower(self) -> float:
        return _clamp(self.refit_lower_raw)

    @property
    def refit_upper(self) -> float:
        return _clamp(self.refit_upper_raw)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "delta": self.delta,
            "lower": self.lower,
            "upper": self.upper,
            "refit_lower": self.refit_lower,
            "refit_upper": self.refit_upper,
        }


def coverage_bounds(n: int, m: int, alpha: float) -> CoverageBounds:
    delta = delta_bound(n, m)
    return CoverageBounds(
        alpha=alpha,
        delta=delta,
        lower_raw=1 - alpha - delta,
        upper_raw=1 - alpha + 1 / (m - 2) + delta,
        refit_lower_raw=1 - alpha - 2 / m,
        refit_upper_raw=1 - alpha + 1 / (m - 2) + 2 / m,
    )


# --- prediction sets --------------------------------------------------------


@dataclass(frozen=True)
class PredictionSet:
    """Interval (regression) or label subset (classification) for one query."""

    kind: str
    threshold: float
    leaf: NodeId | None = None
    lower: float | None = None
    upper: float | None = None
    labels: tuple[int, ...] | None = None
    vacuous: bool = False

    @property
    def empty(self) -> bool:
        return self.kind == COMPLEMENT_PROBABILITY and not self.labels

    @property
    def size(self) -> float:
        if self.kind == ABSOLUTE_RESIDUAL:
            return self.upper - self.lower
        return float(len(self.labels))

    def __contains__(self, y) -> bool:
        if self.kind == ABSOLUTE_RESIDUAL:
            return self.lower <= y <= self.upper
        return int(y) in self.labels


def make_set(kind: str, threshold: float, model_output, leaf=None) -> PredictionSet:
    vacuous = math.isinf(threshold)
    if kind == ABSOLUTE_RESIDUAL:
        mu = float(np.asarray(model_output, dtype=float).reshape(()))
        if vacuous:
            lo, hi = -math.inf, math.inf
        else:
            lo, hi = mu - threshold, mu + threshold
        return PredictionSet(kind, threshold, leaf, lower=lo, upper=hi, vacuous=vacuous)
    if kind == COMPLEMENT_PROBABILITY:
        f = normalize_probabilities(np.asarray(model_output, dtype=float).reshape(-1))
        # 1 - f_k <= S*  is  f_k >= 1 - S*, compared on the score scale
        labels = tuple(int(k) for k in np.flatnonzero(1.0 - f <= threshold))
        return PredictionSet(kind, threshold, leaf, labels=labels, vacuous=vacuous)
    raise ConformalTreeError(f"unknown score kind {kind!r}")


@dataclass
class ConformalRule:
    """A fitted partition with one calibrated score threshold per leaf."""

    tree: DyadicTree
    leaf_thresholds: dict[NodeId, float]
    leaf_counts: dict[NodeId, int]
    alpha: float
    delta: float
    mode: str = SHARED_TREE
    score_kind: str = ABSOLUTE_RESIDUAL
    n: int = 0

    @property
    def bounds(self) -> CoverageBounds:
        return coverage_bounds(self.n, self.tree.config.min_samples_per_leaf, self.alpha)

    def threshold_at(self, x) -> tuple[NodeId, float]:
        leaf = self.tree.leaf_of(x)
        return leaf, self.leaf_thresholds[leaf]

    def thresholds(self, x) -> np.ndarray:
        """Vectorized per-point thresholds for the rows of ``x``."""
        where = self.tree.assign(x)
        table = np.array([self.leaf_thresholds[n] for n in self.tree.leaves])
        return table[where]

    def predict(self, x, model_output) -> PredictionSet:
        leaf, t = self.threshold_at(x)
        return make_set(self.score_kind, t, model_output, leaf)

    def to_dict(self) -> dict:
        out = self.tree.to_dict()
        out.update(
            {
                "alpha": self.alpha,
                "delta": self.delta,
                "mode": self.mode,
                "score_kind": self.score_kind,
                "n": self.n,
                "leaves": [
                    {
                        "l": node.depth,
                        "k": node.position,
                        "threshold": "inf" if math.isinf(t) else t,
                        "count": self.leaf_counts[node],
                    }
                    for node, t in sorted(self.leaf_thresholds.items())
                ],
            }
        )
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConformalRule":
        tree = DyadicTree.from_dict(data)
        thresholds, counts = {}, {}
        for rec in data["leaves"]:
            node = NodeId(int(rec["l"]), int(rec["k"]))
            t = rec["threshold"]
            thresholds[node] = math.inf if t == "inf" else float(t)
            counts[node] = int(rec["count"])
        if set(thresholds) != set(tree.leaves):
            raise ConformalTreeError("leaf thresholds do not match the tree leaves")
        return cls(
            tree,
            thresholds,
            counts,
            float(data["alpha"]),
            float(data["delta"]),
            data.get("mode", SHARED_TREE),
            data.get("score_kind", ABSOLUTE_RESIDUAL),
            int(data.get("n", sum(counts.values()))),
        )

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text: str) -> "ConformalRule":
        return cls.from_dict(json.loads(text))


def _rule_from_tree(tree, x, s, alpha, mode, score_kind) -> ConformalRule:
    where = tree.assign(x)
    thresholds, counts = {}, {}
    for i, node in enumerate(tree.leaves):
        leaf_scores = s[where == i]
        counts[node] = int(leaf_scores.size)
        thresholds[node] = leaf_threshold(leaf_scores, alpha)
    n = len(s)
    m = tree.config.min_samples_per_leaf
    return ConformalRule(tree, thresholds, counts, float(alpha), delta_bound(n, m), mode, score_kind, n)


def calibrate_conformal_tree(
    x, s, config: TreeConfig, alpha: float, score_kind: str = ABSOLUTE_RESIDUAL, dims=None
) -> ConformalRule:
    """Fit the robust tree on calibration scores and calibrate each leaf."""
    x = _check_points(x)
    s = _check_scores(s, len(x))
    _exact(alpha)
    tree = fit_robust_tree(x, s, config, dims=dims)
    return _rule_from_tree(tree, x, s, alpha, SHARED_TREE, score_kind)


def predict_set(rule: ConformalRule, x, model_output) -> PredictionSet:
    return rule.predict(x, model_output)


def refit_rule(x, s, config: TreeConfig, alpha: float, x_new, score_kind=ABSOLUTE_RESIDUAL, dims=None):
    """Rule whose tree was grown with ``x_new`` counted as an unscored point."""
    x = _check_points(x)
    s = _check_scores(s, len(x))
    _exact(alpha)
    tree = fit_robust_tree_with_test_point(x, s, x_new, config, dims=dims)
    return _rule_from_tree(tree, x, s, alpha, REFIT_PER_QUERY, score_kind)


def predict_set_refit(
    x, s, config: TreeConfig, alpha: float, x_new, model_output, score_kind=ABSOLUTE_RESIDUAL
) -> PredictionSet:
    return refit_rule(x, s, config, alpha, x_new, score_kind).predict(x_new, model_output)


def refit_thresholds(x, s, config: TreeConfig, alpha: float, x_new) -> np.ndarray:
    """Thresholds from one refitted tree per query row of ``x_new``."""
    x = _check_points(x)
    s = _check_scores(s, len(x))
    x_new = _check_points(x_new, x.shape[1])
    out = np.empty(len(x_new))
    for i, q in enumerate(x_new):
        tree = fit_robust_tree_with_test_point(x, s, q, config)
        box = tree.box(tree.leaf_of(q))
        out[i] = leaf_threshold(s[box.contains_many(x)], alpha)
    return out


# --- full conformal with a robust tree regressor ----------------------------


@dataclass
class FullConformalBand:
    tree: DyadicTree
    midranges: dict[NodeId, float]
    scores: np.ndarray
    threshold: float

    def center(self, x) -> float:
        return self.midranges[self.tree.leaf_of(x)]

    def band(self, x) -> tuple[float, float]:
        mu = self.center(x)
        return mu - self.threshold, mu + self.threshold


def full_conformal_band(x, y, config: TreeConfig, alpha: float) -> FullConformalBand:
    """Closed-form full-conformal band when the robust tree is the regressor.

    The tree is grown on the responses, leaf predictions are response
    midranges, and the band is the prediction plus/minus the split-conformal
    quantile of the absolute residuals.
    """
    x = _check_points(x)
    y = _check_scores(y, len(x))
    tree = fit_robust_tree(x, y, config)
    mid = leaf_midranges(tree, x, y)
    table = np.array([mid[n] for n in tree.leaves])
    scores = np.abs(y - table[tree.assign(x)])
    return FullConformalBand(tree, mid, scores, split_conformal_threshold(scores, alpha))


# --- naive self-reported uncertainty ----------------------------------------

_MASS_TOL = 1e-12


def naive_set(q, alpha: float) -> frozenset[int]:
    """Smallest top-probability super-level set with mass >= 1 - alpha (ties included)."""
    q = normalize_probabilities(np.asarray(q, dtype=float).reshape(-1))
    target = 1.0 - float(alpha)
    order = np.argsort(-q, kind="stable")
    mass = np.cumsum(q[order])
    stop = int(np.searchsorted(mass, target - _MASS_TOL))
    tau = q[order[min(stop, q.size - 1)]]
    return frozenset(int(k) for k in np.flatnonzero(q >= tau))


def naive_uq_set(prob_samples: Sequence, alpha: float) -> frozenset[int]:
    """Majority vote over the naive sets of ``M`` sampled probability vectors."""
    samples = np.atleast_2d(np.asarray(prob_samples, dtype=float))
    if samples.shape[0] < 1:
        raise ConformalTreeError("need at least one probability sample")
    votes = np.zeros(samples.shape[1], dtype=int)
    for q in samples:
        for k in naive_set(q, alpha):
            votes[k] += 1
    return frozenset(int(k) for k in np.flatnonzero(votes >= samples.shape[0] / 2))
