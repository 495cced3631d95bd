"""Least-squares gradient boosting with greedy regression trees.

Split rule: for every feature, candidate thresholds are midpoints between
consecutive distinct sorted values; the split with the largest SSE reduction
wins, ties going to the lowest feature index and then the lowest threshold.
Rows with ``x[feature] <= threshold`` go left.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthMismatch


@dataclass(frozen=True)
class TrainingConfig:
    n_trees: int = 200
    max_depth: int | None = 3  # None = unbounded
    min_samples_leaf: int = 5
    shrinkage: float = 0.1
    subsample: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0 < self.shrinkage <= 1:
            raise ValueError("shrinkage must be in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must be in (0, 1]")


@dataclass
class RegressionTree:
    """Flat preorder node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    @classmethod
    def from_nodes(cls, nodes: list) -> "RegressionTree":
        """Build from preorder ``("N", feat, thr)`` / ``("L", value)`` tuples."""
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)
        pos = 0

        def rec():
            nonlocal pos
            if pos >= n:
                raise FormatError("truncated tree")
            i = pos
            pos += 1
            node = nodes[i]
            if node[0] == "L":
                value[i] = node[1]
            else:
                feature[i] = node[1]
                threshold[i] = node[2]
                left[i] = rec()
                right[i] = rec()
            return i

        rec()
        if pos != n:
            raise FormatError("trailing nodes after tree")
        return cls(feature, threshold, left, right, value)

    def nodes(self) -> list:
        return [
            ("L", float(self.value[i])) if self.feature[i] < 0
            else ("N", int(self.feature[i]), float(self.threshold[i]))
            for i in range(self.n_nodes)
        ]


def _best_split(X, r, members, orders, min_leaf):
    """Best (gain, feature, threshold) over all features, or None."""
    n = int(members.sum())
    rc = r - r[members].mean()
    total = rc[members].sum()
    base = total * total / n
    best = None
    for f, order in enumerate(orders):
        idx = order[members[order]]
        xs = X[idx, f]
        cs = np.cumsum(rc[idx])
        nl = np.arange(1, n)
        valid = (xs[:-1] != xs[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not valid.any():
            continue
        sl = cs[:-1]
        sr = total - sl
        gain = sl * sl / nl + sr * sr / (n - nl) - base
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > 0 and (best is None or gain[i] > best[0]):
            lo, hi = xs[i], xs[i + 1]
            thr = (lo + hi) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = (float(gain[i]), f, float(thr))
    return best


def fit_tree(X, residuals, cfg: TrainingConfig = TrainingConfig(), orders=None,
             members: np.ndarray | None = None) -> RegressionTree:
    """Greedy top-down least-squares tree; leaves hold the mean residual.

    ``orders`` may carry a precomputed stable argsort per feature column and
    ``members`` a boolean row subset; both only save work.
    """
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(r) or len(r) == 0:
        raise LengthMismatch(f"need matching nonempty X {X.shape} and residuals {r.shape}")
    if orders is None:
        orders = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
    if members is None:
        members = np.ones(len(r), dtype=bool)
    nodes: list = []

    def grow(mask, depth):
        vals = r[mask]
        i = len(nodes)
        nodes.append(None)
        splittable = (
            (cfg.max_depth is None or depth < cfg.max_depth)
            and len(vals) >= 2 * cfg.min_samples_leaf
            and vals.max() > vals.min()
        )
        split = _best_split(X, r, mask, orders, cfg.min_samples_leaf) if splittable else None
        if split is None:
            nodes[i] = ("L", float(vals[0] if vals.max() == vals.min() else vals.mean()))
            return
        _, f, thr = split
        nodes[i] = ("N", f, thr)
        go_left = X[:, f] <= thr
        grow(mask & go_left, depth + 1)
        grow(mask & ~go_left, depth + 1)

    grow(members, 0)
    return RegressionTree.from_nodes(nodes)


@dataclass
class GbmModel:
    base_score: float
    shrinkage: float
    trees: list = field(default_factory=list)
    feature_count: int = 11

    def raw_predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.feature_count:
            raise LengthMismatch(f"expected {self.feature_count} features, got {X.shape[1]}")
        F = np.full(len(X), self.base_score)
        for tree in self.trees[:n_trees]:
            F = F + self.shrinkage * tree.predict(X)
        return F

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Predicted IoU, clamped to [0, 1]."""
        return np.clip(self.raw_predict(X), 0.0, 1.0)

    def to_text(self) -> str:
        lines = [
            f"GBM v1 features={self.feature_count} trees={len(self.trees)} "
            f"base={self.base_score!r} shrinkage={self.shrinkage!r}"
        ]
        for tree in self.trees:
            for node in tree.nodes():
                if node[0] == "L":
                    lines.append(f"L {node[1]!r}")
                else:
                    lines.append(f"N {node[1]} {node[2]!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GbmModel":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty model file")
        head = lines[0].split()
        if head[:2] != ["GBM", "v1"]:
            raise FormatError(f"unsupported model header: {lines[0]!r}")
        try:
            meta = dict(tok.split("=", 1) for tok in head[2:])
            features, n_trees = int(meta["features"]), int(meta["trees"])
            base, shrinkage = float(meta["base"]), float(meta["shrinkage"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad model header {lines[0]!r}: {exc}") from exc

        nodes = []
        for lineno, ln in enumerate(lines[1:], start=2):
            tok = ln.split()
            try:
                if tok[0] == "L" and len(tok) == 2:
                    nodes.append(("L", float(tok[1])))
                elif tok[0] == "N" and len(tok) == 3:
                    f = int(tok[1])
                    if not 0 <= f < features:
                        raise ValueError(f"feature index {f} out of range")
                    nodes.append(("N", f, float(tok[2])))
                else:
                    raise ValueError("expected 'N <feat> <thr>' or 'L <value>'")
            except ValueError as exc:
                raise FormatError(f"model line {lineno}: {exc}") from exc

        trees, pos = [], 0
        for _ in range(n_trees):
            start, need = pos, 1
            while need:
                if pos >= len(nodes):
                    raise FormatError("model file ends inside a tree")
                need += 1 if nodes[pos][0] == "N" else -1
                pos += 1
            trees.append(RegressionTree.from_nodes(nodes[start:pos]))
        if pos != len(nodes):
            raise FormatError(f"model declares {n_trees} trees but has extra nodes")
        return cls(base, shrinkage, trees, features)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "GbmModel":
        return cls.from_text(Path(path).read_text())


def train_gbm(X, y, cfg: TrainingConfig = TrainingConfig()) -> GbmModel:
    """Fit ``n_trees`` rounds of least-squares boosting starting from mean(y)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise LengthMismatch(f"need matching nonempty X {X.shape} and y {y.shape}")
    orders = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
    rng = np.random.default_rng(cfg.seed)
    model = GbmModel(float(statistics.mean(y.tolist())), float(cfg.shrinkage), [], X.shape[1])
    F = np.full(len(y), model.base_score)
    for _ in range(cfg.n_trees):
        members = None
        if cfg.subsample < 1.0:
            members = rng.random(len(y)) < cfg.subsample
            if not members.any():
                members = None
        tree = fit_tree(X, y - F, cfg, orders=orders, members=members)
        model.trees.append(tree)
        F = F + model.shrinkage * tree.predict(X)
    return model


def staged_sse(model: GbmModel, X, y) -> list[float]:
    """Training SSE after 0, 1, ..., n_trees rounds."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    F = np.full(len(y), model.base_score)
    out = [math.fsum((y - F) ** 2)]
    for tree in model.trees:
        F = F + model.shrinkage * tree.predict(X)
        out.append(math.fsum((y - F) ** 2))
    return out
