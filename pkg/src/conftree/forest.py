"""Conformal forests: majority-vote merging of several conformal trees.

Each tree is calibrated on a subsample (drawn without replacement) of the
calibration data and may only split on a random subset of the covariates.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .conformal import (
    ABSOLUTE_RESIDUAL,
    COMPLEMENT_PROBABILITY,
    ConformalRule,
    PredictionSet,
    calibrate_conformal_tree,
    delta_bound,
    make_set,
)
from .dyadic_tree import TreeConfig, _check_points, _check_scores
from .errors import ConformalTreeError
from .rng import derive_rng


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 25
    subsample_fraction: float = 0.7
    feature_fraction: float = 1.0
    base: TreeConfig = field(default_factory=TreeConfig)
    alpha: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ConformalTreeError("num_trees must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ConformalTreeError("subsample_fraction must lie in (0, 1]")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ConformalTreeError("feature_fraction must lie in (0, 1]")

    def subsample_size(self, n: int) -> int:
        return int(math.floor(n * self.subsample_fraction))

    def num_features(self, d: int) -> int:
        return max(1, int(round(d * self.feature_fraction)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "ForestConfig":
        data = dict(data)
        data["base"] = TreeConfig.from_dict(data.get("base", {}))
        return cls(**data)


def calibrate_forest(x, s, config: ForestConfig, score_kind: str = ABSOLUTE_RESIDUAL) -> list[ConformalRule]:
    x = _check_points(x)
    s = _check_scores(s, len(x))
    n, d = x.shape
    b = config.subsample_size(n)
    if b < config.base.min_samples_per_leaf:
        raise ConformalTreeError(
            f"subsample of {b} points is smaller than min_samples_per_leaf="
            f"{config.base.min_samples_per_leaf}"
        )
    p = config.num_features(d)
    rules = []
    for t in range(config.num_trees):
        rng = derive_rng(config.rng_seed, t)
        rows = np.sort(rng.choice(n, size=b, replace=False)) if b < n else np.arange(n)
        dims = np.sort(rng.choice(d, size=p, replace=False)) if p < d else np.arange(d)
        rules.append(
            calibrate_conformal_tree(x[rows], s[rows], config.base, config.alpha, score_kind, dims=dims)
        )
    return rules


def forest_delta(config: ForestConfig, n: int) -> float:
    """``delta`` evaluated at the per-tree subsample size."""
    return delta_bound(config.subsample_size(n), config.base.min_samples_per_leaf)


def merged_half_width(half_widths: Sequence[float]) -> float:
    """Half-width of the strict-majority vote over intervals sharing one center.

    A point at distance t from the center lies in the intervals with
    half-width >= t, so it wins the vote iff at least floor(h/2) + 1 of them
    reach it: the (floor(h/2) + 1)-th largest half-width.
    """
    w = np.sort(np.asarray(half_widths, dtype=float))
    if w.size == 0:
        raise ConformalTreeError("no prediction sets to merge")
    return float(w[w.size - (w.size // 2 + 1)])


def majority_vote_set(rules: Sequence[ConformalRule], x, model_output) -> PredictionSet:
    if not rules:
        raise ConformalTreeError("no rules to merge")
    kinds = {r.score_kind for r in rules}
    if len(kinds) != 1:
        raise ConformalTreeError("rules mix score kinds")
    kind = kinds.pop()
    thresholds = [r.threshold_at(x)[1] for r in rules]
    if kind == ABSOLUTE_RESIDUAL:
        return make_set(kind, merged_half_width(thresholds), model_output)
    if kind == COMPLEMENT_PROBABILITY:
        h = len(rules)
        votes = {}
        for t in thresholds:
            for k in make_set(kind, t, model_output).labels:
                votes[k] = votes.get(k, 0) + 1
        labels = tuple(sorted(k for k, v in votes.items() if v > h / 2))
        vacuous = sum(math.isinf(t) for t in thresholds) > h / 2
        return PredictionSet(kind, math.nan, labels=labels, vacuous=vacuous)
    raise ConformalTreeError(f"unknown score kind {kind!r}")


def forest_thresholds(rules: Sequence[ConformalRule], x) -> np.ndarray:
    """Per-tree thresholds for every query row, shape (len(x), h)."""
    return np.column_stack([r.thresholds(x) for r in rules])


def merged_half_widths(rules: Sequence[ConformalRule], x) -> np.ndarray:
    t = np.sort(forest_thresholds(rules, x), axis=1)
    h = t.shape[1]
    return t[:, h - (h // 2 + 1)]


def forest_to_dict(rules: Sequence[ConformalRule], config: ForestConfig) -> dict:
    return {"config": config.to_dict(), "rules": [r.to_dict() for r in rules]}


def forest_to_json(rules, config) -> str:
    return json.dumps(forest_to_dict(rules, config))


def forest_from_dict(data) -> tuple[list[ConformalRule], ForestConfig]:
    return [ConformalRule.from_dict(r) for r in data["rules"]], ForestConfig.from_dict(data["config"])
