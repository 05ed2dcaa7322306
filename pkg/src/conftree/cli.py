"""Command-line driver: calibrate, predict, simulate, verify.

Exit codes: 0 success, 1 validation error (bad flags, schema or data),
2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .conformal import (
    ABSOLUTE_RESIDUAL,
    COMPLEMENT_PROBABILITY,
    REFIT_PER_QUERY,
    SHARED_TREE,
    ConformalRule,
    absolute_residual_scores,
    calibrate_conformal_tree,
    complement_probability_scores,
    make_set,
    refit_rule,
)
from .data import CsvSchema, FeatureMeta, load_csv
from .dyadic_tree import TreeConfig
from .errors import ConformalTreeError
from .harness import (
    CLASSIFICATION,
    METHODS,
    SimulationConfig,
    check_conditional,
    check_delta,
    check_forest,
    check_marginal,
    check_refit,
    check_unchangeability,
    simulate,
    trial_points,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
CHECKS = ("unchangeability", "marginal", "conditional", "forest", "refit", "delta")
MODES = {"shared": SHARED_TREE, "refit": REFIT_PER_QUERY}


class UsageError(ConformalTreeError):
    pass


# --- calibrate ----------------------------------------------------------------


def _scores(ds, schema: CsvSchema) -> tuple[np.ndarray, str]:
    if ds.y is None:
        raise UsageError(f"calibration data needs the response column {schema.response!r}")
    if schema.is_classification:
        return complement_probability_scores(ds.probs, ds.y), COMPLEMENT_PROBABILITY
    if ds.prediction is None:
        raise UsageError("regression calibration needs a 'prediction' column in the schema")
    return absolute_residual_scores(ds.y, ds.prediction), ABSOLUTE_RESIDUAL


def cmd_calibrate(args) -> int:
    schema = CsvSchema.load(args.schema)
    ds = load_csv(args.data, schema)
    s, kind = _scores(ds, schema)
    config = TreeConfig(args.min_leaf, args.max_leaves)
    if len(s) < config.min_samples_per_leaf:
        raise UsageError(f"{len(s)} calibration rows but --min-leaf is {config.min_samples_per_leaf}")
    rule = calibrate_conformal_tree(ds.rescaled, s, config, args.alpha, kind)
    rule.mode = MODES[args.mode]
    bundle = rule.to_dict()
    bundle["schema"] = schema.to_dict()
    bundle["feature_meta"] = [f.to_dict() for f in ds.features]
    if rule.mode == REFIT_PER_QUERY:
        bundle["calibration"] = {"x": ds.rescaled.tolist(), "scores": s.tolist()}
    Path(args.out).write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    b = rule.bounds
    print(f"n = {rule.n}")
    print(f"leaves = {len(rule.tree.leaves)}")
    for node in rule.tree.leaves:
        t = rule.leaf_thresholds[node]
        print(f"  leaf ({node.depth},{node.position}): m_k = {rule.leaf_counts[node]}  threshold = {t:.6g}")
    print(f"delta(n, m) = {rule.delta:.6g}")
    if rule.mode == REFIT_PER_QUERY:
        print(f"coverage bounds (refit): [{b.refit_lower:.4f}, {b.refit_upper:.4f}]")
    else:
        print(f"coverage bounds: [{b.lower:.4f}, {b.upper:.4f}]")
    return EXIT_OK


# --- predict ------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def cmd_predict(args) -> int:
    bundle = json.loads(Path(args.rule).read_text(encoding="utf-8"))
    try:
        rule = ConformalRule.from_dict(bundle)
        schema = CsvSchema.from_dict(bundle["schema"])
        meta = [FeatureMeta.from_dict(f) for f in bundle["feature_meta"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed rule file: {exc}") from None
    ds = load_csv(args.data, schema, meta=meta, require_response=False)
    if rule.score_kind == ABSOLUTE_RESIDUAL and ds.prediction is None and ds.n:
        raise UsageError(f"test data needs the prediction column {schema.prediction!r}")

    if rule.mode == REFIT_PER_QUERY:
        cal = bundle.get("calibration")
        if cal is None:
            raise UsageError("refit rule file carries no calibration data")
        x_cal = np.asarray(cal["x"], dtype=float)
        s_cal = np.asarray(cal["scores"], dtype=float)

    classification = rule.score_kind == COMPLEMENT_PROBABILITY
    header = ["point_id", "leaf_l", "leaf_k", "threshold"]
    header += ["labels", "vacuous"] if classification else ["lo", "hi", "vacuous"]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for i in range(ds.n):
            x = ds.rescaled[i]
            r = rule
            if rule.mode == REFIT_PER_QUERY:
                r = refit_rule(x_cal, s_cal, rule.tree.config, rule.alpha, x, rule.score_kind)
            leaf, t = r.threshold_at(x)
            model_output = ds.probs[i] if classification else ds.prediction[i]
            ps = make_set(rule.score_kind, t, model_output, leaf)
            row = [i, leaf.depth, leaf.position, _fmt(t)]
            if classification:
                row.append(";".join(schema.prob_labels[k] for k in ps.labels))
            else:
                row += [_fmt(ps.lower), _fmt(ps.upper)]
            row.append(int(ps.vacuous))
            out.writerow(row)
    print(f"wrote {ds.n} prediction set(s) to {args.out}")
    return EXIT_OK


# --- simulate -----------------------------------------------------------------


def _sim_config(args, methods=None) -> SimulationConfig:
    return SimulationConfig(
        generator=args.generator,
        n=args.n,
        trials=args.trials,
        test_size=args.test_size,
        alpha=args.alpha,
        min_leaf=args.min_leaf,
        max_leaves=args.max_leaves,
        methods=tuple(methods if methods is not None else args.methods),
        seed=args.seed,
        knn_k=args.knn_k,
        num_trees=args.num_trees,
        subsample_fraction=args.subsample_fraction,
        feature_fraction=args.feature_fraction,
        num_labels=args.num_labels,
        profile=args.profile,
        record_timing=getattr(args, "timing", False),
    )


def _cell(v, digits=4):
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    return f"{v:.{digits}f}"


def print_report(report: dict, stream=sys.stdout) -> None:
    metric = "width" if report["size_metric"] == "width" else "set size"
    print(f"{report['generator']}: {report['trials']} trial(s), seed {report['seed']}", file=stream)
    print(f"{'method':<12}{'coverage':>10}{metric:>12}{'prop.better':>13}", file=stream)
    for row in report["methods"]:
        print(f"{row['method']:<12}{_cell(row['empirical_coverage']):>10}"
              f"{_cell(row['mean_width_or_set_size']):>12}{_cell(row['proportion_better_than_split']):>13}",
              file=stream)


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    report = simulate(cfg)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print_report(report)
    if args.points_out:
        rows = trial_points(cfg, 0)
        with open(args.points_out, "w", newline="", encoding="utf-8") as fh:
            if rows:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
    return EXIT_OK


# --- verify -------------------------------------------------------------------


def cmd_verify(args) -> int:
    if args.check == "delta":
        result = check_delta()
    elif args.check == "unchangeability":
        if args.generator == CLASSIFICATION:
            raise UsageError("the unchangeability check runs on data1 or data2")
        result = check_unchangeability(args.generator, args.n, args.m, args.K, args.trials, args.seed, args.knn_k)
    else:
        args.min_leaf, args.max_leaves = args.m, args.K
        cfg = _sim_config(args, methods=("tree",))
        result = {"marginal": check_marginal, "conditional": check_conditional,
                  "forest": check_forest, "refit": check_refit}[args.check](cfg)
    print(result.line())
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _method_list(text: str) -> tuple[str, ...]:
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHODS)}")
    if not methods:
        raise argparse.ArgumentTypeError("at least one method is required")
    return methods


def _sim_flags(p: argparse.ArgumentParser, trials: int) -> None:
    p.add_argument("--generator", choices=("data1", "data2", CLASSIFICATION), default="data1")
    p.add_argument("--n", type=int, default=500, help="calibration size per trial")
    p.add_argument("--trials", type=int, default=trials)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--knn-k", type=int, default=10, help="neighbours in the built-in regression model")
    p.add_argument("--num-trees", type=int, default=25)
    p.add_argument("--subsample-fraction", type=float, default=0.7)
    p.add_argument("--feature-fraction", type=float, default=1.0)
    p.add_argument("--num-labels", type=int, default=6)
    p.add_argument("--profile", default="two_region", help="classification difficulty profile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conftree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit a conformal tree rule on calibration data")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--min-leaf", type=int, default=20)
    p.add_argument("--max-leaves", type=int, default=8)
    p.add_argument("--mode", choices=tuple(MODES), default="shared")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="emit prediction sets for a test CSV")
    p.add_argument("--rule", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of methods on synthetic data")
    _sim_flags(p, trials=10)
    p.add_argument("--min-leaf", type=int, default=20)
    p.add_argument("--max-leaves", type=int, default=8)
    p.add_argument("--methods", type=_method_list, default=("split", "tree"))
    p.add_argument("--out")
    p.add_argument("--points-out", help="per-point CSV of the first trial, for plotting")
    p.add_argument("--timing", action="store_true", help="record wall-clock runtime per method")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="Monte Carlo check of a coverage guarantee")
    p.add_argument("--check", choices=CHECKS, required=True)
    _sim_flags(p, trials=50)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--K", type=int, default=8)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            return args.func(args)
    except (ConformalTreeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, RuntimeError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
