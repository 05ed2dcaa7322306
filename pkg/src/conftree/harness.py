"""Monte Carlo experiment and verification protocols.

``simulate`` runs the adaptivity/coverage experiment over independent trials
and aggregates an experiment report; the ``check_*`` functions estimate the
finite-sample guarantees (partition unchangeability, marginal, group
conditional, forest and refit coverage) and compare them with their bounds
using a 3-sigma binomial band.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .conformal import (
    ABSOLUTE_RESIDUAL,
    COMPLEMENT_PROBABILITY,
    calibrate_conformal_tree,
    coverage_bounds,
    delta_bound,
    delta_interpretable,
    naive_uq_set,
    refit_thresholds,
    split_conformal_threshold,
)
from .data import GENERATORS, KNNRegressor, generate_classification
from .dyadic_tree import TreeConfig, fit_robust_tree, partitions_equal
from .errors import ConformalTreeError
from .forest import ForestConfig, calibrate_forest, forest_delta, forest_thresholds
from .rng import derive_seed

METHODS = ("split", "tree", "tree-refit", "forest", "naive")
CLASSIFICATION = "classif"
REPORT_VERSION = "1"
TIE_CONVENTION = "proportion_better counts a test point when its set is the same size as or smaller than split conformal's"

# role keys for seed derivation
_TRAIN, _CALIB, _TEST, _FOREST = 0, 1, 2, 3


@dataclass
class SimulationConfig:
    generator: str = "data1"
    n: int = 500
    trials: int = 10
    test_size: int = 1000
    alpha: float = 0.1
    min_leaf: int = 20
    max_leaves: int = 8
    methods: tuple[str, ...] = ("split", "tree")
    seed: int = 0
    knn_k: int = 10
    num_trees: int = 25
    subsample_fraction: float = 0.7
    feature_fraction: float = 1.0
    num_labels: int = 6
    profile: str = "two_region"
    region_edges: tuple[float, ...] | None = None
    refit_test_size: int | None = None
    record_timing: bool = False

    def __post_init__(self):
        if self.generator not in (*GENERATORS, CLASSIFICATION):
            raise ConformalTreeError(f"unknown generator {self.generator!r}")
        if not self.methods:
            raise ConformalTreeError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConformalTreeError(f"unknown method(s): {', '.join(bad)}")
        if "naive" in self.methods and self.generator != CLASSIFICATION:
            raise ConformalTreeError("the naive baseline needs probability samples (generator classif)")
        if self.trials < 1 or self.test_size < 1:
            raise ConformalTreeError("trials and test_size must be positive")
        self.methods = tuple(self.methods)
        if self.region_edges is None:
            self.region_edges = (0.0, 0.5, 1.0) if self.classification else (0.0, 0.25, 0.5, 0.75, 1.0)
        self.region_edges = tuple(float(e) for e in self.region_edges)
        TreeConfig(self.min_leaf, self.max_leaves)

    @property
    def classification(self) -> bool:
        return self.generator == CLASSIFICATION

    @property
    def tree_config(self) -> TreeConfig:
        return TreeConfig(self.min_leaf, self.max_leaves)

    @property
    def forest_config(self) -> ForestConfig:
        return ForestConfig(self.num_trees, self.subsample_fraction, self.feature_fraction,
                            self.tree_config, self.alpha, 0)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        out["region_edges"] = list(self.region_edges)
        return out


# --- one trial ----------------------------------------------------------------


@dataclass
class _Problem:
    """Calibration scores plus everything needed to score a test batch."""

    x_cal: np.ndarray
    s_cal: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    center: np.ndarray | None = None  # regression: mu(x_test)
    probs: np.ndarray | None = None  # classification: f(x_test)
    prob_samples: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return ABSOLUTE_RESIDUAL if self.probs is None else COMPLEMENT_PROBABILITY

    def test_scores(self) -> np.ndarray:
        if self.probs is None:
            return np.abs(self.y_test - self.center)
        return 1.0 - self.probs[np.arange(len(self.y_test)), self.y_test]


def make_problem(cfg: SimulationConfig, trial: int, n: int | None = None) -> _Problem:
    n = cfg.n if n is None else n
    if cfg.classification:
        cal = generate_classification(n, cfg.num_labels, cfg.profile, derive_seed(cfg.seed, trial, _CALIB))
        test = generate_classification(cfg.test_size, cfg.num_labels, cfg.profile,
                                       derive_seed(cfg.seed, trial, _TEST))
        s = 1.0 - cal.probs[np.arange(n), cal.y]
        return _Problem(cal.rescaled, s, test.rescaled, test.y, probs=test.probs,
                        prob_samples=test.prob_samples)
    gen = GENERATORS[cfg.generator]
    train = gen(n, derive_seed(cfg.seed, trial, _TRAIN))
    cal = gen(n, derive_seed(cfg.seed, trial, _CALIB))
    test = gen(cfg.test_size, derive_seed(cfg.seed, trial, _TEST))
    model = KNNRegressor(cfg.knn_k).fit(train.rescaled, train.y)
    s = np.abs(cal.y - model.predict(cal.rescaled))
    return _Problem(cal.rescaled, s, test.rescaled, test.y, center=model.predict(test.rescaled))


def _sets_from_thresholds(prob: _Problem, thresholds: np.ndarray):
    """(size, covered) per test point for per-point score thresholds."""
    covered = prob.test_scores() <= thresholds
    if prob.kind == ABSOLUTE_RESIDUAL:
        return 2.0 * thresholds, covered
    sizes = (1.0 - prob.probs <= thresholds[:, None]).sum(axis=1).astype(float)
    return sizes, covered


def _run_method(method: str, cfg: SimulationConfig, prob: _Problem, trial: int) -> dict:
    out = {"leaf": None}
    if method == "split":
        t = np.full(len(prob.x_test), split_conformal_threshold(prob.s_cal, cfg.alpha))
        out["size"], out["covered"] = _sets_from_thresholds(prob, t)
    elif method == "tree":
        rule = calibrate_conformal_tree(prob.x_cal, prob.s_cal, cfg.tree_config, cfg.alpha, prob.kind)
        out["size"], out["covered"] = _sets_from_thresholds(prob, rule.thresholds(prob.x_test))
        out["leaf"] = [tuple(rule.tree.leaves[i]) for i in rule.tree.assign(prob.x_test)]
        out["leaf_counts"] = {tuple(k): v for k, v in rule.leaf_counts.items()}
    elif method == "tree-refit":
        k = len(prob.x_test) if cfg.refit_test_size is None else min(cfg.refit_test_size, len(prob.x_test))
        t = refit_thresholds(prob.x_cal, prob.s_cal, cfg.tree_config, cfg.alpha, prob.x_test[:k])
        size, cov = _sets_from_thresholds(prob, np.concatenate([t, np.full(len(prob.x_test) - k, np.nan)]))
        out["size"], out["covered"], out["mask"] = size, cov, np.arange(len(size)) < k
    elif method == "forest":
        fc = cfg.forest_config
        fc = ForestConfig(fc.num_trees, fc.subsample_fraction, fc.feature_fraction, fc.base, fc.alpha,
                          derive_seed(cfg.seed, trial, _FOREST))
        rules = calibrate_forest(prob.x_cal, prob.s_cal, fc, prob.kind)
        t = forest_thresholds(rules, prob.x_test)
        h = t.shape[1]
        if prob.kind == ABSOLUTE_RESIDUAL:
            half = np.sort(t, axis=1)[:, h - (h // 2 + 1)]
            out["size"], out["covered"] = _sets_from_thresholds(prob, half)
        else:
            votes = (1.0 - prob.probs[:, :, None] <= t[:, None, :]).sum(axis=2)
            member = votes > h / 2
            out["size"] = member.sum(axis=1).astype(float)
            out["covered"] = member[np.arange(len(prob.y_test)), prob.y_test]
    elif method == "naive":
        sets = [naive_uq_set(q, cfg.alpha) for q in prob.prob_samples]
        out["size"] = np.array([len(c) for c in sets], dtype=float)
        out["covered"] = np.array([int(y) in c for y, c in zip(prob.y_test, sets)])
    else:
        raise ConformalTreeError(f"unknown method {method!r}")
    return out


def run_trial(cfg: SimulationConfig, trial: int) -> dict:
    prob = make_problem(cfg, trial)
    results, timing = {}, {}
    for method in cfg.methods:
        t0 = time.perf_counter()
        results[method] = _run_method(method, cfg, prob, trial)
        timing[method] = time.perf_counter() - t0
    split_size = None
    if "split" in results:
        split_size = results["split"]["size"]
    else:
        split_size = _run_method("split", cfg, prob, trial)["size"]

    x0 = prob.x_test[:, 0]
    region = np.clip(np.searchsorted(cfg.region_edges, x0, side="right") - 1, 0, len(cfg.region_edges) - 2)
    summary = {}
    for method, r in results.items():
        mask = r.get("mask", np.ones(len(x0), dtype=bool))
        size, cov = r["size"][mask], r["covered"][mask]
        rec = {
            "coverage": float(cov.mean()),
            "mean_size": float(size.mean()),
            "proportion_better": float((size <= split_size[mask]).mean()),
            "region_size": [
                float(size[region[mask] == b].mean()) if np.any(region[mask] == b) else math.nan
                for b in range(len(cfg.region_edges) - 1)
            ],
            "region_coverage": [
                float(cov[region[mask] == b].mean()) if np.any(region[mask] == b) else math.nan
                for b in range(len(cfg.region_edges) - 1)
            ],
            "n_eval": int(mask.sum()),
            "runtime": timing[method],
        }
        if r["leaf"] is not None:
            table = {}
            for leaf, c in zip(r["leaf"], r["covered"]):
                hit, tot = table.get(leaf, (0, 0))
                table[leaf] = (hit + int(c), tot + 1)
            rec["per_leaf"] = [
                {"trial": trial, "l": leaf[0], "k": leaf[1], "calibration_count": r["leaf_counts"][leaf],
                 "test_count": tot, "coverage": hit / tot}
                for leaf, (hit, tot) in sorted(table.items())
            ]
        summary[method] = rec
    return summary


def _worker_count(trials: int) -> int:
    try:
        cap = int(os.environ.get("CT_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, trials))


def _trial_job(args):
    cfg, t = args
    return run_trial(cfg, t)


def run_trials(cfg: SimulationConfig) -> list[dict]:
    jobs = [(cfg, t) for t in range(cfg.trials)]
    workers = _worker_count(cfg.trials)
    if workers == 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_job, jobs))  # map preserves trial order


# --- aggregation --------------------------------------------------------------


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _json_num(v):
    if v is None:
        return None
    v = float(v)
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def aggregate(cfg: SimulationConfig, trials: list[dict]) -> dict:
    rows = []
    for method in cfg.methods:
        recs = [t[method] for t in trials]
        cov, cov_se = _mean_se([r["coverage"] for r in recs])
        size, size_se = _mean_se([r["mean_size"] for r in recs])
        pb, pb_se = _mean_se([r["proportion_better"] for r in recs])
        nb = len(cfg.region_edges) - 1
        by_region = [_mean_se([r["region_size"][b] for r in recs])[0] for b in range(nb)]
        cov_region = [_mean_se([r["region_coverage"][b] for r in recs])[0] for b in range(nb)]
        row = {
            "method": method,
            "mean_width_or_set_size": _json_num(size),
            "mean_width_or_set_size_se": _json_num(size_se),
            "empirical_coverage": _json_num(cov),
            "empirical_coverage_se": _json_num(cov_se),
            "proportion_better_than_split": _json_num(pb),
            "proportion_better_than_split_se": _json_num(pb_se),
            "size_by_region": [_json_num(v) for v in by_region],
            "coverage_by_region": [_json_num(v) for v in cov_region],
            "test_points_evaluated": int(sum(r["n_eval"] for r in recs)),
            "per_leaf_coverage": [row for r in recs for row in r.get("per_leaf", [])],
            "runtime": _json_num(sum(r["runtime"] for r in recs)) if cfg.record_timing else None,
        }
        rows.append(row)
    bounds = coverage_bounds(cfg.n, cfg.min_leaf, cfg.alpha)
    return {
        "version": REPORT_VERSION,
        "generator": cfg.generator,
        "trials": cfg.trials,
        "seed": cfg.seed,
        "size_metric": "set_size" if cfg.classification else "width",
        "proportion_better_convention": TIE_CONVENTION,
        "config": cfg.to_dict(),
        "bounds": bounds.to_dict(),
        "methods": rows,
    }


def simulate(cfg: SimulationConfig) -> dict:
    return aggregate(cfg, run_trials(cfg))


def method_row(report: dict, method: str) -> dict:
    for row in report["methods"]:
        if row["method"] == method:
            return row
    raise KeyError(method)


def trial_points(cfg: SimulationConfig, trial: int = 0) -> list[dict]:
    """Per-test-point rows of one trial, for plotting (regression: interval
    endpoints; classification: set sizes)."""
    prob = make_problem(cfg, trial)
    per = {m: _run_method(m, cfg, prob, trial) for m in cfg.methods}
    rows = []
    for i in range(len(prob.x_test)):
        row = {f"x{j}": float(v) for j, v in enumerate(prob.x_test[i])}
        row["y"] = float(prob.y_test[i])
        if prob.center is not None:
            row["mu"] = float(prob.center[i])
        for m, r in per.items():
            size = float(r["size"][i])
            if prob.kind == ABSOLUTE_RESIDUAL:
                row[f"{m}_lo"] = prob.center[i] - size / 2
                row[f"{m}_hi"] = prob.center[i] + size / 2
            else:
                row[f"{m}_size"] = size
            row[f"{m}_covered"] = int(bool(r["covered"][i]))
        rows.append(row)
    return rows


# --- verification checks ------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    empirical: float
    bound: float
    band: float
    passed: bool
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: empirical={self.empirical:.6g} bound={self.bound:.6g} "
                f"band(3sigma)={self.band:.6g}")

    def to_dict(self) -> dict:
        return asdict(self)


def binomial_sigma(p: float, count: int) -> float:
    p = min(1.0, max(0.0, p))
    return math.sqrt(p * (1.0 - p) / count) if count > 0 else math.inf


def check_unchangeability(generator="data1", n=500, m=20, K=8, reps=500, seed=0, knn_k=10) -> CheckResult:
    """Frequency with which adding one i.i.d. point leaves the partition unchanged."""
    gen = GENERATORS[generator]
    train = gen(n, derive_seed(seed, 0, _TRAIN))
    model = KNNRegressor(knn_k).fit(train.rescaled, train.y)
    config = TreeConfig(m, K)
    same = 0
    for r in range(reps):
        data = gen(n + 1, derive_seed(seed, r, _CALIB))
        s = np.abs(data.y - model.predict(data.rescaled))
        a = fit_robust_tree(data.rescaled[:n], s[:n], config)
        b = fit_robust_tree(data.rescaled, s, config)
        same += partitions_equal(a, b)
    freq = same / reps
    bound = max(0.0, 1.0 - delta_bound(n, m))
    band = 3 * binomial_sigma(bound, reps)
    return CheckResult("unchangeability", freq, bound, band, freq >= bound - band,
                       {"n": n, "m": m, "K": K, "reps": reps, "delta": delta_bound(n, m)})


def _pooled(report: dict, method: str) -> tuple[float, int]:
    row = method_row(report, method)
    return row["empirical_coverage"], row["test_points_evaluated"]


def check_marginal(cfg: SimulationConfig) -> CheckResult:
    cfg = SimulationConfig(**{**cfg.to_dict(), "methods": ("tree",)})
    report = simulate(cfg)
    cov, count = _pooled(report, "tree")
    b = coverage_bounds(cfg.n, cfg.min_leaf, cfg.alpha)
    band_lo = 3 * binomial_sigma(b.lower, count)
    band_hi = 3 * binomial_sigma(b.upper, count)
    ok = b.lower - band_lo <= cov <= b.upper + band_hi
    return CheckResult("marginal", cov, b.lower, band_lo, ok,
                       {"upper": b.upper, "upper_band": band_hi, "delta": b.delta})


def pool_leaves(rows: list[dict]) -> list[dict]:
    """Pool per-trial leaf rows by dyadic box, so coverage averages over calibration draws."""
    pooled = {}
    for r in rows:
        hit, tot, trials = pooled.get((r["l"], r["k"]), (0, 0, 0))
        pooled[(r["l"], r["k"])] = (hit + r["coverage"] * r["test_count"], tot + r["test_count"], trials + 1)
    return [{"l": l, "k": k, "trials": t, "test_count": tot, "coverage": round(hit) / tot}
            for (l, k), (hit, tot, t) in sorted(pooled.items())]


def check_conditional(cfg: SimulationConfig, min_test_points: int = 30) -> CheckResult:
    """Coverage per leaf box, pooled over the trials in which that box was a leaf.

    The guarantee is conditional on the test point's cell but averaged over
    calibration draws, so a single trial's leaf coverage is not its estimand;
    per-trial figures are reported in ``details``.
    """
    cfg = SimulationConfig(**{**cfg.to_dict(), "methods": ("tree",)})
    report = simulate(cfg)
    b = coverage_bounds(cfg.n, cfg.min_leaf, cfg.alpha)
    rows = method_row(report, "tree")["per_leaf_coverage"]
    leaves = [r for r in pool_leaves(rows) if r["test_count"] >= min_test_points]
    failures = [r for r in leaves if r["coverage"] < b.lower - 3 * binomial_sigma(b.lower, r["test_count"])]
    worst = min((r["coverage"] for r in leaves), default=math.nan)
    smallest = min((r["test_count"] for r in leaves), default=0)
    per_trial = [r for r in rows if r["test_count"] >= min_test_points]
    per_trial_below = [r for r in per_trial
                       if r["coverage"] < b.lower - 3 * binomial_sigma(b.lower, r["test_count"])]
    return CheckResult("conditional", worst, b.lower, 3 * binomial_sigma(b.lower, smallest),
                       bool(leaves) and not failures,
                       {"leaves_checked": len(leaves), "failures": failures,
                        "per_trial_leaves": len(per_trial), "per_trial_below": len(per_trial_below),
                        "per_trial_worst": min((r["coverage"] for r in per_trial), default=math.nan)})


def check_forest(cfg: SimulationConfig) -> CheckResult:
    cfg = SimulationConfig(**{**cfg.to_dict(), "methods": ("forest",)})
    report = simulate(cfg)
    cov, count = _pooled(report, "forest")
    delta = forest_delta(cfg.forest_config, cfg.n)
    bound = max(0.0, 1 - 2 * cfg.alpha - 2 * delta)
    band = 3 * binomial_sigma(bound, count)
    return CheckResult("forest", cov, bound, band, cov >= bound - band,
                       {"delta_subsample": delta, "num_trees": cfg.num_trees})


def check_refit(cfg: SimulationConfig) -> CheckResult:
    cfg = SimulationConfig(**{**cfg.to_dict(), "methods": ("tree-refit",)})
    report = simulate(cfg)
    cov, count = _pooled(report, "tree-refit")
    b = coverage_bounds(cfg.n, cfg.min_leaf, cfg.alpha)
    band = 3 * binomial_sigma(b.refit_lower, count)
    return CheckResult("refit", cov, b.refit_lower, band, cov >= b.refit_lower - band,
                       {"refit_upper": b.refit_upper})


def delta_exact(n: int, m: int) -> Fraction:
    """Exact rational value of the unchangeability penalty."""
    N = n + 1
    return Fraction(2, m) + math.comb(N, m) * Fraction(m, N) ** m * Fraction(N - m, N) ** (N - m)


DELTA_GRID_N = (19, 99, 499, 999)
DELTA_GRID_M = (5, 10, 20, 50)


def check_delta(ns=DELTA_GRID_N, ms=DELTA_GRID_M, rtol=1e-10) -> CheckResult:
    worst, dominated = 0.0, True
    for n in ns:
        for m in ms:
            if m > n:
                continue
            exact = delta_exact(n, m)
            err = abs(Fraction(delta_bound(n, m)) - exact) / exact
            worst = max(worst, float(err))
            dominated &= Fraction(delta_interpretable(n, m)) >= exact
    return CheckResult("delta", worst, rtol, 0.0, worst <= rtol and dominated,
                       {"interpretable_dominates": dominated})
