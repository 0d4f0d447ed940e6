"""Tree ensembles: single tree, bagging, random forest, AdaBoost.R2, gradient boosting, XGB.

Every learner shares the tree scanner in :mod:`.tree`. Randomised learners
draw each tree's stream from ``default_rng(seed ^ tree_index)`` so trees can
be fitted in any order or concurrently without changing the model.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ValidationError
from .tree import RegressionTree, fit_cart, fit_tree, scan_splits

KINDS = ("dt", "bagging", "rf", "adaboost", "gb", "xgb")
AVERAGED = ("dt", "bagging", "rf")
BOOSTED = ("gb", "xgb")

# Tuned settings reported for the SPMD US-23 stretch; used when no grid is given.
DEFAULT_PARAMS: dict[str, dict] = {
    "dt": {"d": None, "min_leaf": 1},
    "rf": {"t": 5000, "d": None, "min_leaf": 1, "mtry": None},
    "bagging": {"t": 3000, "d": None, "min_leaf": 1},
    "adaboost": {"t": 3000, "L": 0.0001, "d": 3, "min_leaf": 1},
    "gb": {"t": 5000, "L": 0.001, "d": 6, "min_leaf": 1},
    "xgb": {"t": 40, "L": 0.1, "d": 6, "min_leaf": 1, "lam": 1.0, "gamma": 1.0},
}


@dataclass
class Ensemble:
    kind: str
    trees: list[RegressionTree]
    tree_weights: np.ndarray
    learning_rate: float
    base_score: float
    hyperparams: dict
    n_features: int
    rng_seed: Optional[int] = None
    feature_names: list[str] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValidationError(f"need a non-empty 2-D X matching y, got X{X.shape} y{y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValidationError("training rows must be finite")
    return X, y


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0:
        raise ValidationError("seed must be non-negative")
    return seed


def _check_X(e: Ensemble, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != e.n_features:
        raise ValidationError(f"expected {e.n_features} features, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValidationError("feature vectors must be finite")
    return X


def weighted_median(preds: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Row-wise weighted median of ``preds`` (rows x estimators)."""
    order = np.argsort(preds, axis=1, kind="stable")
    w = weights[order]
    cw = np.cumsum(w, axis=1)
    pick = np.argmax(cw >= 0.5 * cw[:, -1:], axis=1)
    rows = np.arange(len(preds))
    return preds[rows, order[rows, pick]]


def _tree_outputs(e: Ensemble, X: np.ndarray) -> np.ndarray:
    return np.stack([t.predict(X) for t in e.trees], axis=1) if e.trees else np.empty((len(X), 0))


def predict(e: Ensemble, X) -> np.ndarray:
    """Predictions for a matrix of feature vectors (a single vector is accepted too)."""
    X = _check_X(e, X)
    if not e.trees:
        return np.full(len(X), e.base_score)
    out = _tree_outputs(e, X)
    if e.kind == "adaboost":
        return weighted_median(out, e.tree_weights)
    total = _running_sum(out)
    if e.kind in AVERAGED:
        return total / out.shape[1]
    return e.base_score + e.learning_rate * total


def _running_sum(out: np.ndarray) -> np.ndarray:
    # left-to-right so that every prefix is formed the same way as in staged_predict
    total = out[:, 0].copy()
    for k in range(1, out.shape[1]):
        total = total + out[:, k]
    return total


def staged_predict(e: Ensemble, X, stages: Optional[Sequence[int]] = None) -> np.ndarray:
    """Predictions of the k-tree prefixes for each ``k`` in ``stages`` (default 1..K).

    Returns an array of shape ``(len(stages), n_rows)``. Stages beyond the
    fitted tree count (an early-stopped model) repeat the full prediction.
    """
    X = _check_X(e, X)
    K = e.n_trees
    stages = list(range(1, K + 1)) if stages is None else [int(s) for s in stages]
    if any(s < 1 for s in stages):
        raise ValidationError("stages must be >= 1")
    if K == 0:
        return np.full((len(stages), len(X)), e.base_score)
    out = _tree_outputs(e, X)
    res = np.empty((len(stages), len(X)))
    if e.kind == "adaboost":
        for r, s in enumerate(stages):
            k = min(s, K)
            res[r] = weighted_median(out[:, :k], e.tree_weights[:k])
        return res
    # same left-to-right accumulation as predict(), so stage k is bit-identical
    # to predicting with the k-tree prefix
    want = {min(s, K) for s in stages}
    cum = {}
    csum = out[:, 0].copy()
    for k in range(K):
        if k:
            csum = csum + out[:, k]
        if k + 1 in want:
            cum[k + 1] = csum.copy()
    for r, s in enumerate(stages):
        k = min(s, K)
        if e.kind in AVERAGED:
            res[r] = cum[k] / k
        else:
            res[r] = e.base_score + e.learning_rate * cum[k]
    return res


def fit_dt(X, y, d: Optional[int] = None, min_leaf: int = 1) -> Ensemble:
    X, y = _check_xy(X, y)
    tree = fit_cart(X, y, d, min_leaf)
    return Ensemble("dt", [tree], np.ones(1), 1.0, float(np.mean(y)),
                    {"d": d, "min_leaf": min_leaf}, X.shape[1])


def _bagged_tree(X, y, k, seed, d, min_leaf, mtry, bootstrap):
    rng = np.random.default_rng(seed ^ k)
    n = len(y)
    rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    return fit_cart(X, y, d, min_leaf, rows=rows, mtry=mtry, rng=rng)


def _fit_bagged(kind, X, y, t, d, min_leaf, mtry, seed, workers, bootstrap):
    if t < 1:
        raise ValidationError("t must be >= 1")
    args = [(X, y, k, seed, d, min_leaf, mtry, bootstrap) for k in range(t)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(lambda a: _bagged_tree(*a), args))
    else:
        trees = [_bagged_tree(*a) for a in args]
    params = {"t": t, "d": d, "min_leaf": min_leaf}
    if kind == "rf":
        params["mtry"] = mtry
    return Ensemble(kind, trees, np.ones(t), 1.0, float(np.mean(y)), params, X.shape[1], seed)


def fit_bagging(X, y, t: int, d: Optional[int] = None, min_leaf: int = 1, seed: int = 0,
                workers: int = 1, bootstrap: bool = True) -> Ensemble:
    """Average of ``t`` trees, each grown on a bootstrap resample of size n.

    ``bootstrap=False`` trains every tree on the original rows (test hook).
    """
    X, y = _check_xy(X, y)
    return _fit_bagged("bagging", X, y, t, d, min_leaf, None, _check_seed(seed), workers, bootstrap)


def fit_rf(X, y, t: int, d: Optional[int] = None, min_leaf: int = 1, mtry: Optional[int] = None,
           seed: int = 0, workers: int = 1) -> Ensemble:
    """Bagging plus ``mtry`` features drawn without replacement at every split.

    Default ``mtry`` is ``ceil(m / 3)``.
    """
    X, y = _check_xy(X, y)
    m = X.shape[1]
    mtry = math.ceil(m / 3) if mtry is None else int(mtry)
    if not 1 <= mtry <= m:
        raise ValidationError(f"mtry must be in [1, {m}]")
    return _fit_bagged("rf", X, y, t, d, min_leaf, mtry, _check_seed(seed), workers, True)


def adaboost_r2_update(weights: np.ndarray, abs_err: np.ndarray, L: float = 1.0):
    """One AdaBoost.R2 (linear loss) re-weighting.

    Returns ``(new_weights, avg_loss, beta, tree_weight)``; ``new_weights`` is
    ``None`` when the round fails (average loss >= 0.5).
    """
    max_err = float(abs_err.max())
    if max_err == 0.0:
        return weights, 0.0, 0.0, 1.0
    loss = abs_err / max_err
    avg = float(np.sum(weights * loss))
    if avg <= 0.0:
        return weights, 0.0, 0.0, 1.0
    if avg >= 0.5:
        return None, avg, None, None
    beta = avg / (1.0 - avg)
    new = weights * np.power(beta, (1.0 - loss) * L)
    return new / new.sum(), avg, beta, L * math.log(1.0 / beta)


def fit_adaboost(X, y, t: int, L: float = 1.0, d: Optional[int] = 3, min_leaf: int = 1,
                 seed: int = 0) -> Ensemble:
    """AdaBoost.R2 with linear loss and weighted-median aggregation.

    Each round resamples n rows by the current weights. A perfect tree ends
    boosting after being kept with weight 1; a round whose average loss
    reaches 0.5 ends boosting and is discarded (unless it is the first).
    """
    X, y = _check_xy(X, y)
    seed = _check_seed(seed)
    if t < 1:
        raise ValidationError("t must be >= 1")
    if not 0.0 < L <= 1.0:
        raise ValidationError("learning rate L must be in (0, 1]")
    params = {"t": t, "L": L, "d": d, "min_leaf": min_leaf}
    n = len(y)
    base = float(np.mean(y))
    if np.all(y == y[0]):
        return Ensemble("adaboost", [], np.zeros(0), L, base, params, X.shape[1], seed)
    w = np.full(n, 1.0 / n)
    trees: list[RegressionTree] = []
    tw: list[float] = []
    for k in range(t):
        rng = np.random.default_rng(seed ^ k)
        rows = rng.choice(n, size=n, replace=True, p=w)
        tree = fit_cart(X, y, d, min_leaf, rows=rows)
        new_w, avg, beta, weight = adaboost_r2_update(w, np.abs(tree.predict(X) - y), L)
        if new_w is None:
            if not trees:
                trees.append(tree)
                tw.append(1.0)
            break
        trees.append(tree)
        tw.append(weight)
        if avg == 0.0:
            break
        w = new_w
    return Ensemble("adaboost", trees, np.array(tw), L, base, params, X.shape[1], seed)


def fit_gb(X, y, t: int, L: float = 0.1, d: Optional[int] = 3, min_leaf: int = 1) -> Ensemble:
    """Squared-loss gradient boosting: each CART tree fits the current residuals."""
    X, y = _check_xy(X, y)
    if t < 1:
        raise ValidationError("t must be >= 1")
    if not 0.0 <= L <= 1.0:
        raise ValidationError("learning rate L must be in [0, 1]")
    base = float(np.mean(y))
    pred = np.full(len(y), base)
    trees = []
    for _ in range(t):
        resid = y - pred
        tree = fit_cart(X, resid, d, min_leaf)
        trees.append(tree)
        pred = pred + L * tree.predict(X)
    return Ensemble("gb", trees, np.ones(t), L, base, {"t": t, "L": L, "d": d, "min_leaf": min_leaf}, X.shape[1])


def xgb_leaf_weight(G: float, H: float, lam: float) -> float:
    """Leaf score minimising ``G*w + (H + lam)*w^2/2``."""
    if not H + lam > 0:
        raise ValidationError("H + lambda must be positive")
    return -G / (H + lam)


def xgb_split_gain(G_L: float, H_L: float, G_R: float, H_R: float, lam: float, gamma: float) -> float:
    return 0.5 * (G_L * G_L / (H_L + lam) + G_R * G_R / (H_R + lam)
                  - (G_L + G_R) ** 2 / (H_L + H_R + lam)) - gamma


def tree_penalty(tree: RegressionTree, lam: float, gamma: float, scale: float = 1.0) -> float:
    """gamma*T + lam/2 * sum of squared leaf scores, on the tree scaled by ``scale``."""
    leaves = tree.leaves * scale
    return gamma * len(leaves) + 0.5 * lam * float(np.dot(leaves, leaves))


def regularized_objective(e: Ensemble, X, y, stages: Optional[Sequence[int]] = None) -> np.ndarray:
    """Training objective after each prefix of ``e``: squared loss (1/2 sum r^2) + penalties.

    The penalty applies to the contribution actually added, i.e. leaf scores
    multiplied by the learning rate.
    """
    lam = e.hyperparams.get("lam", 0.0)
    gamma = e.hyperparams.get("gamma", 0.0)
    y = np.asarray(y, dtype=float)
    stages = list(range(1, e.n_trees + 1)) if stages is None else list(stages)
    preds = staged_predict(e, X, stages)
    pen = np.cumsum([tree_penalty(t, lam, gamma, e.learning_rate) for t in e.trees])
    out = []
    for r, s in enumerate(stages):
        resid = y - preds[r]
        out.append(0.5 * float(np.dot(resid, resid)) + (pen[min(s, e.n_trees) - 1] if e.n_trees else 0.0))
    return np.array(out)


def fit_xgb(X, y, t: int = 40, L: float = 0.1, d: Optional[int] = 6, min_leaf: int = 1,
            lam: float = 1.0, gamma: float = 1.0) -> Ensemble:
    """Second-order boosting with the gamma*T + lam/2*||C||^2 complexity penalty.

    Squared loss gives g = prediction - target and h = 1. Splits are taken
    only when their gain is positive. A round whose (shrunk) tree would raise
    the regularised training objective ends boosting, so ``K <= t``.
    """
    X, y = _check_xy(X, y)
    if t < 1:
        raise ValidationError("t must be >= 1")
    if not 0.0 <= L <= 1.0:
        raise ValidationError("learning rate L must be in [0, 1]")
    if lam < 0 or gamma < 0:
        raise ValidationError("lambda and gamma must be non-negative")
    m = X.shape[1]
    base = float(np.mean(y))
    pred = np.full(len(y), base)
    h = np.ones(len(y))
    trees = []
    features = range(m)
    for _ in range(t):
        g = pred - y

        def leaf(idx, g=g):
            return xgb_leaf_weight(float(np.sum(g[idx])), float(np.sum(h[idx])), lam)

        def split(idx, g=g):
            s = scan_splits(X, idx, g, h, features, min_leaf, lam)
            if s is None:
                return None
            gain = 0.5 * s.score - gamma
            return (s, gain) if gain > 0 else None

        tree = fit_tree(X, d, min_leaf, leaf, split)
        leaf_of = tree.apply(X)
        step = L * tree.value[leaf_of]
        delta = float(np.dot(g, step) + 0.5 * np.dot(step, step)) + tree_penalty(tree, lam, gamma, L)
        if delta > 0:
            break
        trees.append(tree)
        pred = pred + step
    return Ensemble("xgb", trees, np.ones(len(trees)), L, base,
                    {"t": t, "L": L, "d": d, "min_leaf": min_leaf, "lam": lam, "gamma": gamma}, m)


def fit_model(kind: str, X, y, params: Optional[dict] = None, seed: int = 0, workers: int = 1) -> Ensemble:
    """Fit any supported learner; unspecified parameters fall back to :data:`DEFAULT_PARAMS`."""
    if kind not in KINDS:
        raise ValidationError(f"unknown algorithm {kind!r}; expected one of {', '.join(KINDS)}")
    p = dict(DEFAULT_PARAMS[kind])
    p.update({k: v for k, v in (params or {}).items() if k in p})
    if kind == "dt":
        return fit_dt(X, y, p["d"], p["min_leaf"])
    if kind == "bagging":
        return fit_bagging(X, y, p["t"], p["d"], p["min_leaf"], seed, workers)
    if kind == "rf":
        return fit_rf(X, y, p["t"], p["d"], p["min_leaf"], p["mtry"], seed, workers)
    if kind == "adaboost":
        return fit_adaboost(X, y, p["t"], p["L"], p["d"], p["min_leaf"], seed)
    if kind == "gb":
        return fit_gb(X, y, p["t"], p["L"], p["d"], p["min_leaf"])
    return fit_xgb(X, y, p["t"], p["L"], p["d"], p["min_leaf"], p["lam"], p["gamma"])


def feature_importance(e: Ensemble) -> dict:
    """Share of total recorded split gain per feature (keys are names when known)."""
    totals = np.zeros(e.n_features)
    for tree in e.trees:
        internal = tree.feature >= 0
        np.add.at(totals, tree.feature[internal], tree.gain[internal])
    total = totals.sum()
    if not any(t.n_splits for t in e.trees) or total <= 0:
        raise ValidationError("no splits: feature importance is undefined")
    names = e.feature_names if len(e.feature_names) == e.n_features else list(range(e.n_features))
    return {name: float(v / total) for name, v in zip(names, totals)}
