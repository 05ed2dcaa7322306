import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest

from conftree.cli import EXIT_OK, EXIT_VALIDATION, main
from conftree.conformal import ConformalRule
from conftree.dyadic_tree import ROOT


@pytest.fixture(scope="module")
def report_schema():
    text = resources.files("conftree").joinpath("schemas/report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def write_regression(tmp_path, n=400, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 10, n)
    b = rng.integers(0, 5, n)
    pred = 2 * a
    y = pred + rng.normal(0, 0.1 + a / 4, n)
    cal = tmp_path / "cal.csv"
    with open(cal, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "pred", "y"])
        w.writerows(zip(a, b, pred, y))
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({
        "features": [{"name": "a", "kind": "continuous"}, {"name": "b", "kind": "ordinal"}],
        "response": "y", "prob_labels": None, "prediction": "pred",
    }))
    return cal, schema


def write_classification(tmp_path, n=600, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 2))
    probs = rng.dirichlet(np.ones(4), size=n)
    labels = [rng.choice(4, p=p) for p in probs]
    names = ["p0", "p1", "p2", "p3"]
    cal = tmp_path / "ccal.csv"
    with open(cal, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", *names, "label"])
        for i in range(n):
            w.writerow([*x[i], *probs[i], labels[i]])
    schema = tmp_path / "cschema.json"
    schema.write_text(json.dumps({
        "features": [{"name": "u", "kind": "continuous"}, {"name": "v", "kind": "continuous"}],
        "response": "label", "prob_labels": names, "prediction": None,
    }))
    return cal, schema


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_calibrate_and_predict_regression(tmp_path, capsys):
    cal, schema = write_regression(tmp_path)
    rule_path = tmp_path / "rule.json"
    assert main(["calibrate", "--data", str(cal), "--schema", str(schema), "--alpha", "0.1",
                 "--min-leaf", "10", "--max-leaves", "20", "--out", str(rule_path)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "n = 400" in printed and "delta(n, m)" in printed and "coverage bounds" in printed
    rule = ConformalRule.from_json(rule_path.read_text())
    assert len(rule.tree.leaves) <= 20
    assert min(rule.leaf_counts.values()) >= 10

    out = tmp_path / "sets.csv"
    assert main(["predict", "--rule", str(rule_path), "--data", str(cal), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert rows[0] == ["point_id", "leaf_l", "leaf_k", "threshold", "lo", "hi", "vacuous"]
    assert len(rows) == 401
    for row in rows[1:]:
        lo, t, hi = float(row[4]), float(row[3]), float(row[5])
        assert hi - lo == pytest.approx(2 * t)


def test_single_leaf_rule_is_split_conformal(tmp_path):
    cal, schema = write_regression(tmp_path)
    rule_path = tmp_path / "rule.json"
    main(["calibrate", "--data", str(cal), "--schema", str(schema), "--max-leaves", "1",
          "--out", str(rule_path)])
    rule = ConformalRule.from_json(rule_path.read_text())
    assert rule.tree.leaves == (ROOT,) and rule.leaf_counts[ROOT] == 400


def test_legislator_style_run(tmp_path):
    cal, schema = write_regression(tmp_path, n=1000)
    rule_path = tmp_path / "rule.json"
    assert main(["calibrate", "--data", str(cal), "--schema", str(schema), "--alpha", "0.2",
                 "--min-leaf", "200", "--max-leaves", "20", "--out", str(rule_path)]) == EXIT_OK
    rule = ConformalRule.from_json(rule_path.read_text())
    assert min(rule.leaf_counts.values()) >= 200 and len(rule.tree.leaves) <= 5


def test_empty_test_file_gives_header_only(tmp_path):
    cal, schema = write_regression(tmp_path)
    rule_path = tmp_path / "rule.json"
    main(["calibrate", "--data", str(cal), "--schema", str(schema), "--out", str(rule_path)])
    empty = tmp_path / "empty.csv"
    empty.write_text("a,b,pred\n")
    out = tmp_path / "sets.csv"
    assert main(["predict", "--rule", str(rule_path), "--data", str(empty), "--out", str(out)]) == EXIT_OK
    assert read_rows(out) == [["point_id", "leaf_l", "leaf_k", "threshold", "lo", "hi", "vacuous"]]


def test_boundary_point_is_deterministic(tmp_path):
    cal, schema = write_regression(tmp_path)
    rule_path = tmp_path / "rule.json"
    main(["calibrate", "--data", str(cal), "--schema", str(schema), "--out", str(rule_path)])
    rule = ConformalRule.from_json(rule_path.read_text())
    meta = json.loads(rule_path.read_text())["feature_meta"]
    # raw value that rescales exactly to the midpoint of feature a
    mid_a = meta[0]["min"] + 0.5 * (meta[0]["max"] - meta[0]["min"])
    test = tmp_path / "test.csv"
    test.write_text(f"a,b,pred\n{mid_a!r},2,0\n")
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}.csv"
        main(["predict", "--rule", str(rule_path), "--data", str(test), "--out", str(out)])
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    row = read_rows(tmp_path / "s0.csv")[1]
    leaf = rule.tree.leaf_of([0.5, 0.5])
    assert (int(row[1]), int(row[2])) == tuple(leaf)


def test_refit_mode_round_trip(tmp_path):
    cal, schema = write_regression(tmp_path, n=200)
    rule_path = tmp_path / "rule.json"
    assert main(["calibrate", "--data", str(cal), "--schema", str(schema), "--mode", "refit",
                 "--min-leaf", "10", "--out", str(rule_path)]) == EXIT_OK
    out = tmp_path / "sets.csv"
    assert main(["predict", "--rule", str(rule_path), "--data", str(cal), "--out", str(out)]) == EXIT_OK
    assert len(read_rows(out)) == 201


def test_classification_sets_within_label_count(tmp_path):
    cal, schema = write_classification(tmp_path)
    rule_path = tmp_path / "rule.json"
    assert main(["calibrate", "--data", str(cal), "--schema", str(schema), "--min-leaf", "10",
                 "--max-leaves", "20", "--out", str(rule_path)]) == EXIT_OK
    out = tmp_path / "sets.csv"
    assert main(["predict", "--rule", str(rule_path), "--data", str(cal), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert rows[0] == ["point_id", "leaf_l", "leaf_k", "threshold", "labels", "vacuous"]
    for row in rows[1:]:
        labels = [v for v in row[4].split(";") if v]
        assert 0 <= len(labels) <= 4
        assert set(labels) <= {"p0", "p1", "p2", "p3"}


def test_schema_mismatch_lists_columns(tmp_path, capsys):
    cal, schema = write_regression(tmp_path)
    rule_path = tmp_path / "rule.json"
    main(["calibrate", "--data", str(cal), "--schema", str(schema), "--out", str(rule_path)])
    bad = tmp_path / "bad.csv"
    bad.write_text("a,c\n1,2\n")
    code = main(["predict", "--rule", str(rule_path), "--data", str(bad), "--out", str(tmp_path / "o.csv")])
    assert code == EXIT_VALIDATION
    assert "missing columns: b, pred" in capsys.readouterr().err


def test_validation_exit_codes(tmp_path):
    cal, schema = write_regression(tmp_path)
    assert main(["calibrate", "--data", str(cal), "--schema", str(schema), "--min-leaf", "2",
                 "--out", str(tmp_path / "r.json")]) == EXIT_VALIDATION
    assert main(["calibrate", "--data", str(tmp_path / "nope.csv"), "--schema", str(schema),
                 "--out", str(tmp_path / "r.json")]) == EXIT_VALIDATION
    assert main(["simulate", "--generator", "data9"]) == EXIT_VALIDATION
    assert main(["simulate", "--methods", "naive"]) == EXIT_VALIDATION
    assert main(["simulate", "--methods", ""]) == EXIT_VALIDATION
    assert main(["verify", "--check", "bogus"]) == EXIT_VALIDATION


def test_simulate_is_byte_identical_and_schema_valid(tmp_path, report_schema):
    outs = []
    for k in range(2):
        path = tmp_path / f"r{k}.json"
        assert main(["simulate", "--generator", "data2", "--trials", "1", "--seed", "5",
                     "--methods", "split,tree,tree-refit,forest", "--num-trees", "5",
                     "--out", str(path)]) == EXIT_OK
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    report = json.loads(outs[0])
    jsonschema.validate(report, report_schema)
    assert report["trials"] == 1 and report["seed"] == 5
    assert [r["method"] for r in report["methods"]] == ["split", "tree", "tree-refit", "forest"]
    assert "same size as or smaller" in report["proportion_better_convention"]


def test_simulate_classification_points_csv(tmp_path, report_schema):
    report_path, points = tmp_path / "r.json", tmp_path / "p.csv"
    assert main(["simulate", "--generator", "classif", "--n", "400", "--trials", "2", "--test-size", "200",
                 "--min-leaf", "10", "--max-leaves", "20", "--methods", "split,tree,naive",
                 "--out", str(report_path), "--points-out", str(points), "--timing"]) == EXIT_OK
    report = json.loads(report_path.read_text())
    jsonschema.validate(report, report_schema)
    assert all(r["runtime"] is not None for r in report["methods"])
    rows = read_rows(points)
    assert len(rows) == 201 and "tree_size" in rows[0]


def test_verify_delta(capsys):
    assert main(["verify", "--check", "delta"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS delta")


def test_verify_marginal_single_leaf(capsys):
    assert main(["verify", "--check", "marginal", "--K", "1", "--trials", "5"]) == EXIT_OK
    line = capsys.readouterr().out
    assert line.startswith("PASS marginal")
