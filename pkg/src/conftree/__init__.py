"""Locally adaptive split-conformal prediction with robust dyadic trees."""

from .conformal import (
    ConformalRule,
    CoverageBounds,
    PredictionSet,
    calibrate_conformal_tree,
    coverage_bounds,
    delta_bound,
    full_conformal_band,
    leaf_threshold,
    naive_uq_set,
    predict_set,
    predict_set_refit,
)
from .dyadic_tree import (
    Box,
    DyadicTree,
    NodeId,
    TreeConfig,
    fit_robust_tree,
    fit_robust_tree_with_test_point,
    leaf_of,
    partitions_equal,
)
from .forest import ForestConfig, calibrate_forest, majority_vote_set

__version__ = "0.1.0"

__all__ = [
    "ConformalRule",
    "CoverageBounds",
    "PredictionSet",
    "calibrate_conformal_tree",
    "coverage_bounds",
    "delta_bound",
    "full_conformal_band",
    "leaf_threshold",
    "naive_uq_set",
    "predict_set",
    "predict_set_refit",
    "Box",
    "DyadicTree",
    "NodeId",
    "TreeConfig",
    "fit_robust_tree",
    "fit_robust_tree_with_test_point",
    "leaf_of",
    "partitions_equal",
    "ForestConfig",
    "calibrate_forest",
    "majority_vote_set",
]
