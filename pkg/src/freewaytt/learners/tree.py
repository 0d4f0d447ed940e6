"""Binary regression trees grown by exact greedy split search.

A fitted tree is a flat array of nodes in depth-first (pre-)order. Leaves
have ``feature == -1``; ``apply`` maps each input row to its leaf node, and
``predict`` returns that leaf's score.

The same scanner serves CART and the second-order boosted trees: for node
gradients ``g`` and hessians ``h`` a split scores

    G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)

which, with ``g`` = targets, ``h`` = 1 and ``lam`` = 0, is exactly the drop in
sum of squared errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ValidationError

# Relative tolerance (against the node's sum of squared gradients) below which
# score differences are rounding noise: used for acceptance and for ties.
SCORE_RTOL = 1e-12


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    score: float


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())

    @property
    def n_splits(self) -> int:
        return len(self.feature) - self.n_leaves

    @property
    def leaves(self) -> np.ndarray:
        """Leaf scores in node order."""
        return self.value[self.is_leaf]

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def scaled(self, factor: float) -> "RegressionTree":
        return RegressionTree(self.feature, self.threshold, self.left, self.right, self.value * factor, self.gain)


def _midpoint(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    mid = a + (b - a) / 2.0
    # adjacent doubles can round the midpoint up onto b
    return np.where(mid < b, mid, a)


def scan_splits(X: np.ndarray, idx: np.ndarray, g: np.ndarray, h: np.ndarray,
                features: Sequence[int], min_leaf: int = 1, lam: float = 0.0) -> Optional[Split]:
    """Best exact split of rows ``idx`` over ``features``.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values. Ties (within :data:`SCORE_RTOL`) go to the lower feature index,
    then the lower threshold. Returns ``None`` unless the best score is
    positive beyond rounding noise.
    """
    n = len(idx)
    if n < 2 * min_leaf or n < 2:
        return None
    g_node = g[idx]
    h_node = h[idx]
    tol = SCORE_RTOL * float(np.dot(g_node, g_node))
    if lam == 0.0:
        # score is shift-invariant when lam == 0; centring removes cancellation
        g_node = g_node - np.sum(g_node) / n
    counts = np.arange(1, n)
    size_ok = (counts >= min_leaf) & (n - counts >= min_leaf)
    best: Optional[Split] = None
    for f in features:
        xs = X[idx, f]
        o = np.argsort(xs, kind="stable")
        v = xs[o]
        cg = np.cumsum(g_node[o])
        ch = np.cumsum(h_node[o])
        G, H = cg[-1], ch[-1]
        GL, HL = cg[:-1], ch[:-1]
        GR, HR = G - GL, H - HL
        valid = size_ok & (v[1:] > v[:-1])
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            score = GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam)
        score = np.where(valid, score, -np.inf)
        top = score.max()
        if not np.isfinite(top):
            continue
        pos = int(np.flatnonzero(score >= top - tol)[0])
        if best is None or top > best.score + tol:
            thr = float(_midpoint(v[pos], v[pos + 1]))
            best = Split(int(f), thr, float(score[pos]))
    if best is None or not best.score > tol:
        return None
    return best


SplitFn = Callable[[np.ndarray], Optional[tuple[Split, float]]]
LeafFn = Callable[[np.ndarray], float]


def fit_tree(X: np.ndarray, d: Optional[int], min_leaf: int, leaf_value_fn: LeafFn,
             split_fn: SplitFn, rows: Optional[np.ndarray] = None) -> RegressionTree:
    """Depth-first growth to depth ``d`` (``None`` = unbounded).

    ``split_fn(idx)`` returns ``(split, recorded_gain)`` or ``None`` to make a
    leaf; ``leaf_value_fn(idx)`` scores a leaf.
    """
    if d is not None and d < 1:
        raise ValidationError("max depth d must be >= 1")
    X = np.asarray(X, dtype=float)
    rows = np.arange(len(X)) if rows is None else np.asarray(rows)
    if len(rows) == 0:
        raise ValidationError("cannot fit a tree on zero rows")
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    gain: list[float] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(leaf_value_fn(idx))
        gain.append(0.0)
        if d is not None and depth >= d:
            return node
        found = split_fn(idx) if len(idx) >= 2 * min_leaf else None
        if found is None:
            return node
        split, recorded = found
        go_left = X[idx, split.feature] <= split.threshold
        feature[node] = split.feature
        threshold[node] = split.threshold
        gain[node] = recorded
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(rows, 0)
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                          np.array(value, dtype=float), np.array(gain, dtype=float))


def best_split_variance(X: np.ndarray, y: np.ndarray, feature_set: Optional[Sequence[int]] = None,
                        min_leaf: int = 1):
    """Best SSE-reducing split: ``(feature, threshold, sse_reduction)`` or ``None``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    features = range(X.shape[1]) if feature_set is None else sorted(feature_set)
    s = scan_splits(X, np.arange(len(y)), y, np.ones_like(y), features, min_leaf, 0.0)
    if s is None:
        return None
    return s.feature, s.threshold, s.score


def mean_leaf(y: np.ndarray) -> LeafFn:
    return lambda idx: float(np.sum(y[idx]) / len(idx))


def cart_split(X: np.ndarray, y: np.ndarray, min_leaf: int,
               mtry: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> SplitFn:
    """Variance split finder; with ``mtry`` each call draws that many features from ``rng``."""
    m = X.shape[1]
    ones = np.ones_like(y)

    def split(idx):
        if mtry is not None and mtry < m:
            feats = np.sort(rng.choice(m, size=mtry, replace=False))
        else:
            feats = range(m)
        s = scan_splits(X, idx, y, ones, feats, min_leaf, 0.0)
        return None if s is None else (s, s.score)

    return split


def fit_cart(X: np.ndarray, y: np.ndarray, d: Optional[int] = None, min_leaf: int = 1,
             rows: Optional[np.ndarray] = None, mtry: Optional[int] = None,
             rng: Optional[np.random.Generator] = None) -> RegressionTree:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    return fit_tree(X, d, min_leaf, mean_leaf(y), cart_split(X, y, min_leaf, mtry, rng), rows)
