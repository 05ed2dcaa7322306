"""Robust dyadic regression trees.

A tree is a set of nodes ``(depth, position)`` rooted at ``(0, 0)``; the
children of ``(l, k)`` are ``(l+1, 2k)`` (left) and ``(l+1, 2k+1)`` (right).
Every internal node carries a split dimension and cuts its box at the dyadic
midpoint along that dimension, so all cell boundaries are exact dyadic
rationals.

Trees are grown greedily on ``(x, score)`` pairs using the range criterion:
a leaf is split in the direction that most reduces the score range
``max - min`` averaged over the two children, subject to a minimum number of
samples per child, a minimum range-reduction rate and a leaf budget.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .errors import (
    ConformalTreeError,
    EmptyNodeError,
    IneligibleDirection,
    InsufficientDataError,
    OutOfDomainError,
)

TREE_FORMAT_VERSION = "1"


class NodeId(NamedTuple):
    depth: int
    position: int

    @property
    def left(self) -> "NodeId":
        return NodeId(self.depth + 1, 2 * self.position)

    @property
    def right(self) -> "NodeId":
        return NodeId(self.depth + 1, 2 * self.position + 1)

    def ancestor(self, depth: int) -> "NodeId":
        if not 0 <= depth <= self.depth:
            raise ValueError(f"no ancestor at depth {depth} for {self}")
        return NodeId(depth, self.position >> (self.depth - depth))

    def ancestors(self) -> list["NodeId"]:
        return [self.ancestor(j) for j in range(self.depth)]


ROOT = NodeId(0, 0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box whose side along dim j is
    ``[index[j] / 2**level[j], (index[j] + 1) / 2**level[j]]``.

    Membership is half-open (``lower <= x < upper``) except on the upper face
    of the unit cube, which is closed.
    """

    index: tuple[int, ...]
    level: tuple[int, ...]

    @classmethod
    def unit(cls, d: int) -> "Box":
        return cls((0,) * d, (0,) * d)

    @property
    def d(self) -> int:
        return len(self.index)

    @property
    def lower(self) -> np.ndarray:
        return np.array([a / 2.0**p for a, p in zip(self.index, self.level)])

    @property
    def upper(self) -> np.ndarray:
        return np.array([(a + 1) / 2.0**p for a, p in zip(self.index, self.level)])

    def fractions(self) -> list[tuple[Fraction, Fraction]]:
        return [
            (Fraction(a, 2**p), Fraction(a + 1, 2**p))
            for a, p in zip(self.index, self.level)
        ]

    def midpoint(self, dim: int) -> float:
        return (2 * self.index[dim] + 1) / 2.0 ** (self.level[dim] + 1)

    def split(self, dim: int) -> tuple["Box", "Box"]:
        level = list(self.level)
        level[dim] += 1
        left = list(self.index)
        left[dim] = 2 * self.index[dim]
        right = list(left)
        right[dim] += 1
        return Box(tuple(left), tuple(level)), Box(tuple(right), tuple(level))

    def contains(self, x) -> bool:
        return bool(self.contains_many(np.asarray(x, dtype=float)[None, :])[0])

    def contains_many(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.lower, self.upper
        inside = x >= lo
        closed = hi >= 1.0
        inside &= np.where(closed, x <= hi, x < hi)
        return inside.all(axis=1)

    def to_dict(self) -> dict:
        return {
            "lower": [str(a) for a, _ in self.fractions()],
            "upper": [str(b) for _, b in self.fractions()],
        }


@dataclass(frozen=True)
class TreeConfig:
    min_samples_per_leaf: int = 20
    max_leaves: int = 8
    min_range_reduction_rate: float = 0.05
    max_depth_per_dimension: int = 20

    def __post_init__(self):
        if int(self.min_samples_per_leaf) != self.min_samples_per_leaf or self.min_samples_per_leaf < 3:
            raise ConformalTreeError("min_samples_per_leaf must be an integer >= 3")
        if int(self.max_leaves) != self.max_leaves or self.max_leaves < 1:
            raise ConformalTreeError("max_leaves must be an integer >= 1")
        if not 0.0 < self.min_range_reduction_rate < 1.0:
            raise ConformalTreeError("min_range_reduction_rate must lie in (0, 1)")
        if self.max_depth_per_dimension < 1:
            raise ConformalTreeError("max_depth_per_dimension must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TreeConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


class DyadicTree:
    """An immutable fitted dyadic tree over ``[0, 1]^d``.

    Parameters
    ----------
    d : int
        Covariate dimension.
    split_directions : mapping NodeId -> int
        Split dimension of every internal node. The node set is the root plus
        the children of every internal node.
    config : TreeConfig, optional
        Echoed into the serialized form.
    split_gains : mapping NodeId -> float, optional
        Range reduction recorded when each internal node was split.
    """

    def __init__(
        self,
        d: int,
        split_directions: Mapping[NodeId, int] | None = None,
        config: TreeConfig | None = None,
        split_gains: Mapping[NodeId, float] | None = None,
    ):
        if d < 1:
            raise ConformalTreeError("dimension must be >= 1")
        self.d = int(d)
        self.config = config or TreeConfig()
        self._split = {NodeId(*n): int(j) for n, j in (split_directions or {}).items()}
        self._gains = {NodeId(*n): float(g) for n, g in (split_gains or {}).items()}

        boxes = {ROOT: Box.unit(self.d)}
        for node in sorted(self._split):
            if node not in boxes:
                raise ConformalTreeError(f"internal node {tuple(node)} has no parent in the tree")
            j = self._split[node]
            if not 0 <= j < self.d:
                raise ConformalTreeError(f"split dimension {j} out of range for d={self.d}")
            boxes[node.left], boxes[node.right] = boxes[node].split(j)
        self._boxes = boxes
        self._leaves = tuple(sorted(n for n in boxes if n not in self._split))

    @property
    def nodes(self) -> frozenset[NodeId]:
        return frozenset(self._boxes)

    @property
    def internal(self) -> tuple[NodeId, ...]:
        return tuple(sorted(self._split))

    @property
    def leaves(self) -> tuple[NodeId, ...]:
        return self._leaves

    @property
    def split_directions(self) -> dict[NodeId, int]:
        return dict(self._split)

    @property
    def split_gains(self) -> dict[NodeId, float]:
        return dict(self._gains)

    @property
    def leaf_boxes(self) -> dict[NodeId, Box]:
        return {n: self._boxes[n] for n in self._leaves}

    def box(self, node: NodeId) -> Box:
        return self._boxes[NodeId(*node)]

    def is_leaf(self, node: NodeId) -> bool:
        return NodeId(*node) in self._boxes and NodeId(*node) not in self._split

    def partition(self) -> frozenset[Box]:
        return frozenset(self._boxes[n] for n in self._leaves)

    def leaf_of(self, x) -> NodeId:
        x = _check_point(x, self.d)
        node = ROOT
        while node in self._split:
            j = self._split[node]
            node = node.left if x[j] < self._boxes[node].midpoint(j) else node.right
        return node

    def assign(self, x: np.ndarray) -> np.ndarray:
        """Index into ``self.leaves`` of the leaf containing each row of ``x``."""
        x = _check_points(x, self.d)
        out = np.full(len(x), -1, dtype=np.int64)
        for i, node in enumerate(self._leaves):
            out[self._boxes[node].contains_many(x)] = i
        return out

    def __eq__(self, other):
        if not isinstance(other, DyadicTree):
            return NotImplemented
        return self.d == other.d and self._split == other._split

    def __hash__(self):
        return hash((self.d, frozenset(self._split.items())))

    def __repr__(self):
        return f"DyadicTree(d={self.d}, leaves={len(self._leaves)})"

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "config": self.config.to_dict(),
            "nodes": [
                {"l": n.depth, "k": n.position, "split_dim": self._split.get(n)}
                for n in sorted(self._boxes)
            ],
            "version": TREE_FORMAT_VERSION,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "DyadicTree":
        if str(data.get("version")) != TREE_FORMAT_VERSION:
            raise ConformalTreeError(f"unsupported tree format version {data.get('version')!r}")
        split = {}
        present = set()
        for rec in data["nodes"]:
            node = NodeId(int(rec["l"]), int(rec["k"]))
            present.add(node)
            if rec.get("split_dim") is not None:
                split[node] = int(rec["split_dim"])
        tree = cls(int(data["d"]), split, TreeConfig.from_dict(data.get("config", {})))
        if present != set(tree.nodes):
            raise ConformalTreeError("node list is inconsistent with the split directions")
        return tree

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DyadicTree":
        return cls.from_dict(json.loads(text))


def _check_point(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (d,):
        raise ConformalTreeError(f"expected a point of dimension {d}, got shape {x.shape}")
    if not np.all((x >= 0.0) & (x <= 1.0)):
        raise OutOfDomainError("point out of domain [0, 1]^d")
    return x


def _check_points(x, d: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or (d is not None and x.shape[1] != d):
        raise ConformalTreeError(f"expected an (n, {d}) covariate matrix, got shape {x.shape}")
    if not np.all((x >= 0.0) & (x <= 1.0)):
        raise OutOfDomainError("point out of domain [0, 1]^d")
    return x


def _check_scores(s, n: int) -> np.ndarray:
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.shape != (n,):
        raise ConformalTreeError(f"expected {n} scores, got {s.shape[0]}")
    if not np.all(np.isfinite(s)):
        raise ConformalTreeError("scores must be finite")
    return s


def node_range(scores) -> float:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise EmptyNodeError("empty node")
    return float(scores.max() - scores.min())


# --- split evaluation -------------------------------------------------------


@dataclass
class _SplitStat:
    n_left: int
    n_right: int
    gain: float | None  # None when a child holds no scored sample


def _split_stat(box: Box, idx: np.ndarray, dim: int, x, s, x_test=None) -> _SplitStat:
    mid = box.midpoint(dim)
    go_left = x[idx, dim] < mid
    left, right = s[idx[go_left]], s[idx[~go_left]]
    n_left, n_right = left.size, right.size
    if x_test is not None:
        # the hallucinated point is counted but never scored
        if x_test[dim] < mid:
            n_left += 1
        else:
            n_right += 1
    if left.size == 0 or right.size == 0:
        return _SplitStat(n_left, n_right, None)
    parent = s[idx]
    r = parent.max() - parent.min()
    gain = r - ((left.max() - left.min()) + (right.max() - right.min())) / 2.0
    return _SplitStat(n_left, n_right, float(gain))


def _leaf_gains(box, idx, x, s, config: TreeConfig, dims, x_test=None) -> dict[int, float]:
    """Range reductions of every eligible split direction of a leaf."""
    if idx.size == 0:
        return {}
    parent = s[idx]
    r = parent.max() - parent.min()
    if r <= 0.0:
        return {}
    m = config.min_samples_per_leaf
    out = {}
    for j in dims:
        if box.level[j] + 1 > config.max_depth_per_dimension:
            continue
        st = _split_stat(box, idx, j, x, s, x_test)
        if st.n_left < m or st.n_right < m or st.gain is None:
            continue
        if st.gain / r >= config.min_range_reduction_rate:
            out[j] = st.gain
    return out


def _points_in(tree: DyadicTree, node: NodeId, x: np.ndarray) -> np.ndarray:
    return np.flatnonzero(tree.box(node).contains_many(x))


def range_reduction(tree: DyadicTree, node: NodeId, dim: int, x, s) -> float:
    """Range reduction from splitting ``node`` of ``tree`` along ``dim``.

    Raises IneligibleDirection when one of the two children would be empty.
    """
    x = _check_points(x, tree.d)
    s = _check_scores(s, len(x))
    node = NodeId(*node)
    idx = _points_in(tree, node, x)
    if idx.size == 0:
        raise EmptyNodeError("empty node")
    st = _split_stat(tree.box(node), idx, dim, x, s)
    if st.gain is None:
        raise IneligibleDirection(f"split of {tuple(node)} along dim {dim} leaves an empty child")
    return st.gain


def eligible_directions(tree: DyadicTree, node: NodeId, x, s, x_test=None, dims=None) -> set[int]:
    """Dimensions along which leaf ``node`` may be split under ``tree.config``.

    When ``x_test`` is given and lies in the node, it is counted toward the
    child sizes but contributes no score.
    """
    x = _check_points(x, tree.d)
    s = _check_scores(s, len(x))
    node = NodeId(*node)
    if not tree.is_leaf(node):
        raise ConformalTreeError(f"{tuple(node)} is not a leaf of the tree")
    box = tree.box(node)
    if x_test is not None:
        x_test = _check_point(x_test, tree.d)
        if not box.contains(x_test):
            x_test = None
    idx = _points_in(tree, node, x)
    dims = range(tree.d) if dims is None else sorted(dims)
    return set(_leaf_gains(box, idx, x, s, tree.config, dims, x_test))


# --- fitting ----------------------------------------------------------------


@dataclass
class _Leaf:
    node: NodeId
    box: Box
    idx: np.ndarray
    has_test: bool
    gains: dict[int, float] = field(default_factory=dict)

    def best(self) -> tuple[float, int] | None:
        best = None
        for j in sorted(self.gains):
            if best is None or self.gains[j] > best[0]:
                best = (self.gains[j], j)
        return best


def _grow(x, s, config: TreeConfig, dims, x_test) -> DyadicTree:
    d = x.shape[1]
    dims = list(range(d)) if dims is None else sorted(set(int(j) for j in dims))
    if not dims or any(not 0 <= j < d for j in dims):
        raise ConformalTreeError(f"split dimensions {dims} invalid for d={d}")

    def make_leaf(node, box, idx, has_test):
        leaf = _Leaf(node, box, idx, has_test)
        leaf.gains = _leaf_gains(box, idx, x, s, config, dims, x_test if has_test else None)
        return leaf

    leaves = {ROOT: make_leaf(ROOT, Box.unit(d), np.arange(len(x)), x_test is not None)}
    split, gains = {}, {}
    while len(leaves) < config.max_leaves:
        chosen = None
        for node in sorted(leaves):
            b = leaves[node].best()
            if b is not None and (chosen is None or b[0] > chosen[0]):
                chosen = (b[0], b[1], node)
        if chosen is None:
            break
        gain, j, node = chosen
        leaf = leaves.pop(node)
        split[node], gains[node] = j, gain
        lbox, rbox = leaf.box.split(j)
        mid = leaf.box.midpoint(j)
        go_left = x[leaf.idx, j] < mid
        test_left = leaf.has_test and x_test[j] < mid
        leaves[node.left] = make_leaf(node.left, lbox, leaf.idx[go_left], test_left)
        leaves[node.right] = make_leaf(
            node.right, rbox, leaf.idx[~go_left], leaf.has_test and not test_left
        )
    return DyadicTree(d, split, config, gains)


def fit_robust_tree(x, s, config: TreeConfig, dims: Iterable[int] | None = None) -> DyadicTree:
    """Greedy robust dyadic tree on covariates ``x`` (n, d) and scores ``s``.

    Ties between candidate splits go to the smallest depth, then the smallest
    position, then the smallest dimension. ``dims`` restricts the dimensions
    that may be split.
    """
    x = _check_points(x)
    s = _check_scores(s, len(x))
    if len(x) < config.min_samples_per_leaf:
        raise InsufficientDataError("insufficient calibration data")
    return _grow(x, s, config, dims, None)


def fit_robust_tree_with_test_point(
    x, s, x_test, config: TreeConfig, dims: Iterable[int] | None = None
) -> DyadicTree:
    """Robust tree grown with an unscored test covariate ``x_test``.

    The test point counts toward the minimum-leaf-size checks of every node
    containing it but never enters a range or range-reduction computation.
    """
    x = _check_points(x)
    s = _check_scores(s, len(x))
    x_test = _check_point(x_test, x.shape[1])
    if len(x) < config.min_samples_per_leaf:
        raise InsufficientDataError("insufficient calibration data")
    return _grow(x, s, config, dims, x_test)


def leaf_of(tree: DyadicTree, x) -> NodeId:
    return tree.leaf_of(x)


def partitions_equal(a: DyadicTree, b: DyadicTree) -> bool:
    if a.d != b.d:
        raise ConformalTreeError(f"dimension mismatch: {a.d} vs {b.d}")
    return a.partition() == b.partition()


def leaf_midranges(tree: DyadicTree, x, y) -> dict[NodeId, float]:
    """Center of the response range in every leaf (NaN for empty leaves)."""
    x = _check_points(x, tree.d)
    y = _check_scores(y, len(x))
    where = tree.assign(x)
    out = {}
    for i, node in enumerate(tree.leaves):
        vals = y[where == i]
        out[node] = float((vals.max() + vals.min()) / 2.0) if vals.size else float("nan")
    return out


def tree_regressor_predict(tree: DyadicTree, midranges: Mapping[NodeId, float], x) -> float:
    return float(midranges[tree.leaf_of(x)])
