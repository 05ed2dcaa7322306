"""Synthetic generators, covariate rescaling, CSV ingestion and a k-NN
stand-in for the black-box regressor."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .conformal import normalize_probabilities
from .errors import ConformalTreeError, SchemaError
from .rng import derive_rng

CONTINUOUS, ORDINAL, BINARY = "continuous", "ordinal", "binary"
FEATURE_KINDS = (CONTINUOUS, ORDINAL, BINARY)

# lower edge of the covariate draw in both regression generators (4/x and x^-3 blow up at 0)
X_FLOOR = 1e-12


@dataclass
class FeatureMeta:
    name: str
    kind: str = CONTINUOUS
    min: float = 0.0
    max: float = 1.0

    @property
    def constant(self) -> bool:
        return self.max == self.min

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureMeta":
        return cls(data["name"], data.get("kind", CONTINUOUS), float(data["min"]), float(data["max"]))


@dataclass
class Dataset:
    x_raw: np.ndarray
    y: np.ndarray | None
    features: list[FeatureMeta]
    rescaled: np.ndarray
    probs: np.ndarray | None = None
    prediction: np.ndarray | None = None
    prob_samples: np.ndarray | None = None
    clamped: np.ndarray | None = None
    labels: list[str] | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.rescaled)

    @property
    def d(self) -> int:
        return self.rescaled.shape[1]

    def subset(self, rows) -> "Dataset":
        take = lambda a: None if a is None else a[rows]
        return Dataset(
            self.x_raw[rows], take(self.y), self.features, self.rescaled[rows],
            take(self.probs), take(self.prediction), take(self.prob_samples),
            take(self.clamped), self.labels, list(self.warnings),
        )


# --- rescaling ----------------------------------------------------------------


def fit_feature_meta(x_raw: np.ndarray, kinds: Sequence[str], names: Sequence[str] | None = None) -> list[FeatureMeta]:
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=float))
    names = names or [f"x{j}" for j in range(x_raw.shape[1])]
    meta = []
    for j, (name, kind) in enumerate(zip(names, kinds)):
        if kind not in FEATURE_KINDS:
            raise ConformalTreeError(f"unknown feature kind {kind!r} for {name}")
        col = x_raw[:, j]
        if kind == BINARY and np.unique(col).size > 2:
            raise ConformalTreeError(f"binary feature {name} takes more than two values")
        lo, hi = (float(col.min()), float(col.max())) if col.size else (0.0, 1.0)
        meta.append(FeatureMeta(name, kind, lo, hi))
    return meta


def rescale(x_raw: np.ndarray, meta: Sequence[FeatureMeta]) -> tuple[np.ndarray, np.ndarray]:
    """Affine map of each column onto [0, 1] using the recorded min/max.

    Constant columns map to 0.5. Values outside the recorded range are clamped;
    the second return value flags the rows where that happened.
    """
    x_raw = np.asarray(x_raw, dtype=float)
    if x_raw.ndim == 1:
        x_raw = x_raw[:, None]
    out = np.empty_like(x_raw)
    clamped = np.zeros(len(x_raw), dtype=bool)
    for j, f in enumerate(meta):
        col = x_raw[:, j]
        if f.constant:
            out[:, j] = 0.5
            clamped |= col != f.min
            continue
        v = (col - f.min) / (f.max - f.min)
        clamped |= (v < 0.0) | (v > 1.0)
        out[:, j] = np.clip(v, 0.0, 1.0)
    return out, clamped


def make_dataset(x_raw, y=None, kinds=None, names=None, meta=None, **extra) -> Dataset:
    x_raw = np.asarray(x_raw, dtype=float)
    if x_raw.ndim == 1:
        x_raw = x_raw[:, None]
    if meta is None:
        meta = fit_feature_meta(x_raw, kinds or [CONTINUOUS] * x_raw.shape[1], names)
    rescaled, clamped = rescale(x_raw, meta)
    notes = []
    for f in meta:
        if f.constant:
            notes.append(f"feature {f.name} is constant; rescaled to 0.5")
    if clamped.any():
        notes.append(f"{int(clamped.sum())} row(s) outside the calibration range were clamped to [0, 1]")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    return Dataset(x_raw, None if y is None else np.asarray(y), list(meta), rescaled,
                   clamped=clamped, warnings=notes, **extra)


# --- generators ---------------------------------------------------------------


def data1_mean(x):
    return 3.0 * np.sin(4.0 / x + 0.2) + 1.5


def data2_mean(x):
    return np.sin(x ** -3.0)


def _unit_meta(d: int) -> list[FeatureMeta]:
    return [FeatureMeta(f"x{j}", CONTINUOUS, 0.0, 1.0) for j in range(d)]


def generate_data1(n: int, rng_seed: int) -> Dataset:
    """X ~ U(0, 1); Y | X ~ N(3 sin(4/X + 0.2) + 1.5, X^2)."""
    rng = derive_rng(rng_seed, 1)
    x = rng.uniform(X_FLOOR, 1.0, size=n)
    y = data1_mean(x) + x * rng.standard_normal(n)
    return Dataset(x[:, None], y, _unit_meta(1), x[:, None].copy())


def generate_data2(n: int, rng_seed: int) -> Dataset:
    """X ~ U(0, 1); Y | X ~ N(sin(X^-3), 0.1^2)."""
    rng = derive_rng(rng_seed, 2)
    x = rng.uniform(X_FLOOR, 1.0, size=n)
    y = data2_mean(x) + 0.1 * rng.standard_normal(n)
    return Dataset(x[:, None], y, _unit_meta(1), x[:, None].copy())


def sharpness(profile, x: np.ndarray) -> np.ndarray:
    """Top-class probability of the synthetic classifier at each covariate row."""
    if isinstance(profile, (int, float)):
        return np.full(len(x), float(profile))
    if profile == "constant":
        return np.full(len(x), 0.6)
    if profile == "two_region":
        return np.where(x[:, 0] < 0.5, 0.95, 0.35)
    raise ConformalTreeError(f"unknown difficulty profile {profile!r}")


def generate_classification(
    n: int,
    num_labels: int = 6,
    difficulty_profile="two_region",
    rng_seed: int = 0,
    d: int = 2,
    num_samples: int = 11,
    temperature: float = 2.0,
    concentration: float = 20.0,
) -> Dataset:
    """Covariates, a model's probability vectors, and labels drawn from them.

    The model puts ``sharpness(profile, x)`` on one random class and spreads the
    rest with a flat Dirichlet draw; the true label is drawn from the model's
    own vector. ``prob_samples`` (n, num_samples, L) emulate resampled,
    softened outputs (temperature-scaled, then Dirichlet-perturbed) for the
    naive self-reported baseline.
    """
    if num_labels < 2:
        raise ConformalTreeError("need at least two labels")
    rng = derive_rng(rng_seed, 3)
    x = rng.uniform(0.0, 1.0, size=(n, d))
    top_p = sharpness(difficulty_profile, x)
    top = rng.integers(num_labels, size=n)
    rest = rng.dirichlet(np.ones(num_labels - 1), size=n) * (1.0 - top_p)[:, None]
    probs = np.empty((n, num_labels))
    for i in range(n):
        probs[i] = np.insert(rest[i], top[i], top_p[i])
    probs /= probs.sum(axis=1, keepdims=True)
    y = np.array([rng.choice(num_labels, p=p) for p in probs], dtype=np.int64)

    soft = probs ** (1.0 / temperature)
    soft /= soft.sum(axis=1, keepdims=True)
    samples = np.empty((n, num_samples, num_labels))
    for i in range(n):
        samples[i] = rng.dirichlet(concentration * soft[i] + 1e-3, size=num_samples)
    samples /= samples.sum(axis=2, keepdims=True)
    return Dataset(x, y, _unit_meta(d), x.copy(), probs=probs, prob_samples=samples,
                   labels=[f"class{k}" for k in range(num_labels)])


GENERATORS = {"data1": generate_data1, "data2": generate_data2}


# --- k-nearest-neighbour regressor -------------------------------------------


class KNNRegressor:
    """Mean response of the k nearest training points (Euclidean, rescaled
    covariates); ties in distance go to the smaller training index."""

    def __init__(self, k: int = 10):
        self.k = int(k)

    def fit(self, x, y) -> "KNNRegressor":
        x = np.asarray(x, dtype=float)
        self.x_ = x[:, None] if x.ndim == 1 else x
        self.y_ = np.asarray(y, dtype=float)
        if len(self.x_) == 0:
            raise ConformalTreeError("empty training set")
        if not 1 <= self.k <= len(self.x_):
            raise ConformalTreeError(f"k={self.k} must lie in [1, {len(self.x_)}]")
        return self

    def predict(self, x, chunk: int = 2048) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        out = np.empty(len(x))
        for start in range(0, len(x), chunk):
            q = x[start:start + chunk]
            dist = ((q[:, None, :] - self.x_[None, :, :]) ** 2).sum(axis=2)
            nearest = np.argsort(dist, axis=1, kind="stable")[:, : self.k]
            out[start:start + chunk] = self.y_[nearest].mean(axis=1)
        return out


def knn_regressor_fit_predict(train: Dataset, k: int, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1 and x.size == train.d
    pred = KNNRegressor(k).fit(train.rescaled, train.y).predict(x.reshape(1, -1) if single else x)
    return float(pred[0]) if single else pred


# --- CSV ingestion ------------------------------------------------------------


@dataclass
class CsvSchema:
    features: list[tuple[str, str]]
    response: str | None = None
    prob_labels: list[str] | None = None
    prediction: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping) -> "CsvSchema":
        if not isinstance(data, Mapping) or "features" not in data:
            raise SchemaError("schema needs a 'features' list")
        feats = []
        for f in data["features"]:
            kind = f.get("kind", CONTINUOUS)
            if kind not in FEATURE_KINDS:
                raise SchemaError(f"feature {f.get('name')!r} has unknown kind {kind!r}")
            feats.append((str(f["name"]), kind))
        if not feats:
            raise SchemaError("schema declares no features")
        return cls(feats, data.get("response"), data.get("prob_labels"), data.get("prediction"))

    @classmethod
    def load(cls, path) -> "CsvSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "features": [{"name": n, "kind": k} for n, k in self.features],
            "response": self.response,
            "prob_labels": self.prob_labels,
            "prediction": self.prediction,
        }

    @property
    def is_classification(self) -> bool:
        return bool(self.prob_labels)

    def columns(self, with_response: bool = True) -> list[str]:
        cols = [n for n, _ in self.features]
        cols += list(self.prob_labels or [])
        if self.prediction:
            cols.append(self.prediction)
        if with_response and self.response:
            cols.append(self.response)
        return cols


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"column {col!r}: non-numeric value {text!r}", row=row, columns=[col]) from None
    if not math.isfinite(v):
        raise SchemaError(f"column {col!r}: non-finite value {text!r}", row=row, columns=[col])
    return v


def load_csv(path, schema, meta: Sequence[FeatureMeta] | None = None, require_response: bool = True) -> Dataset:
    """Read, validate and rescale a CSV file described by ``schema``.

    ``meta`` carries calibration-time min/max; when omitted it is fitted on
    this file. With ``require_response=False`` the response column may be
    absent (test files).
    """
    if not isinstance(schema, CsvSchema):
        schema = CsvSchema.load(schema) if isinstance(schema, (str, Path)) else CsvSchema.from_dict(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("missing header row") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    has_response = bool(schema.response) and schema.response in header
    missing = [c for c in schema.columns(with_response=require_response) if c not in header]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}", columns=missing)
    pos = {c: header.index(c) for c in header}
    names = [n for n, _ in schema.features]
    kinds = [k for _, k in schema.features]

    n = len(rows)
    x_raw = np.empty((n, len(names)))
    probs = np.empty((n, len(schema.prob_labels))) if schema.is_classification else None
    pred = np.empty(n) if schema.prediction else None
    y = None
    if has_response:
        y = np.empty(n, dtype=np.int64 if schema.is_classification else float)
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise SchemaError(f"expected {len(header)} fields, found {len(r)}", row=i)
        for j, c in enumerate(names):
            x_raw[i - 1, j] = _parse_float(r[pos[c]], i, c)
        if probs is not None:
            for j, c in enumerate(schema.prob_labels):
                probs[i - 1, j] = _parse_float(r[pos[c]], i, c)
            try:
                probs[i - 1] = normalize_probabilities(probs[i - 1])
            except ConformalTreeError as exc:
                raise SchemaError(str(exc), row=i, columns=schema.prob_labels) from None
        if pred is not None:
            pred[i - 1] = _parse_float(r[pos[schema.prediction]], i, schema.prediction)
        if y is not None:
            raw = r[pos[schema.response]].strip()
            if schema.is_classification:
                if raw in schema.prob_labels:
                    y[i - 1] = schema.prob_labels.index(raw)
                else:
                    v = _parse_float(raw, i, schema.response)
                    if v != int(v) or not 0 <= v < len(schema.prob_labels):
                        raise SchemaError(f"label {raw!r} is not a known class", row=i,
                                          columns=[schema.response])
                    y[i - 1] = int(v)
            else:
                y[i - 1] = _parse_float(raw, i, schema.response)

    if meta is None:
        for j, (name, kind) in enumerate(schema.features):
            if kind == BINARY and np.unique(x_raw[:, j]).size > 2:
                raise SchemaError(f"binary feature {name!r} takes more than two values", columns=[name])
    return make_dataset(x_raw, y, kinds, names, meta=meta, probs=probs, prediction=pred,
                        labels=list(schema.prob_labels) if schema.prob_labels else None)
