"""Hyperparameter grid search scored by k-fold cross-validated MAPE, and test-set evaluation.

Scores are averaged over segments first, then over folds. For every model
family whose prediction is a prefix-function of its trees (all but ``dt``),
one fit at the largest ``t`` per fold scores every smaller ``t`` through
:func:`~freewaytt.learners.staged_predict`.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .estimation import TravelTimeMatrix
from .features import FeatureSpec, SupervisedDataset, build_supervised, local_hour_fraction
from .learners import DEFAULT_PARAMS, KINDS, fit_model, predict, staged_predict

logger = logging.getLogger(__name__)

T_RANGE = (1, 8000)
D_VALUES = (1, 2, 3, 4, 5, 6, 7)
L_VALUES = (0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0)
DEFAULT_PEAKS = ((6, 9), (16, 19))

# parameters varied by the grid for each algorithm; everything else stays fixed
RELEVANT = {
    "dt": (),
    "bagging": ("t",),
    "rf": ("t",),
    "adaboost": ("t", "L"),
    "gb": ("t", "L", "d"),
    "xgb": ("t", "L", "d"),
}


def mape(actual, predicted) -> float:
    """Mean absolute percentage error, in percent."""
    a = np.asarray(actual, dtype=float)
    p = np.asarray(predicted, dtype=float)
    if a.shape != p.shape or a.size == 0:
        raise ValidationError("mape needs two equal-length, non-empty series")
    if np.any(a == 0):
        raise ValidationError("mape is undefined when an actual value is zero")
    return float(np.mean(np.abs((a - p) / a)) * 100.0)


def kfold_split(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Seeded shuffle, then contiguous slices; the first ``n % k`` folds get one extra row."""
    if not 2 <= k <= n:
        raise ValidationError(f"need 2 <= k <= n (k={k}, n={n})")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [n // k + (1 if f < n % k else 0) for f in range(k)]
    bounds = np.cumsum([0] + sizes)
    return [np.sort(perm[bounds[f]:bounds[f + 1]]) for f in range(k)]


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def segment_mape(actual, predicted, segment_id) -> tuple[float, dict]:
    """Mean over segments of per-segment MAPE, and the per-segment values."""
    per = {}
    for sid in sorted(set(segment_id)):
        sel = segment_id == sid
        per[sid] = mape(actual[sel], predicted[sel])
    return float(np.mean(list(per.values()))), per


@dataclass
class GridSpec:
    algorithm: str
    t_values: Sequence[int] = (100,)
    d_values: Sequence[int] = D_VALUES
    L_values: Sequence[float] = L_VALUES
    k: int = 5
    seed: int = 0
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in KINDS:
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        rel = RELEVANT[self.algorithm]
        for name, values in (("t", self.t_values), ("d", self.d_values), ("L", self.L_values)):
            if name in rel and not list(values):
                raise ValidationError(f"grid for {name} is empty")
        if "t" in rel and not all(T_RANGE[0] <= int(t) <= T_RANGE[1] for t in self.t_values):
            raise ValidationError(f"t values must lie in {T_RANGE[0]}..{T_RANGE[1]}")
        if "d" in rel and not all(1 <= int(d) <= 7 for d in self.d_values):
            raise ValidationError("d values must lie in 1..7")
        if "L" in rel and not all(0 < float(v) <= 1 for v in self.L_values):
            raise ValidationError("L values must lie in (0, 1]")
        if self.k < 2:
            raise ValidationError("k must be >= 2")

    @property
    def relevant(self) -> tuple[str, ...]:
        return RELEVANT[self.algorithm]

    def fit_groups(self) -> list[dict]:
        """Parameter sets that need their own fit (everything except ``t``)."""
        rel = self.relevant
        axes = []
        if "L" in rel:
            axes.append([("L", float(v)) for v in self.L_values])
        if "d" in rel:
            axes.append([("d", int(v)) for v in self.d_values])
        return [dict(c) for c in itertools.product(*axes)] if axes else [{}]

    def ts(self) -> list[int]:
        return sorted({int(t) for t in self.t_values}) if "t" in self.relevant else [None]

    def combos(self) -> list[dict]:
        return [dict(g, t=t) for g in self.fit_groups() for t in self.ts()]


@dataclass(frozen=True)
class ComboScore:
    params: dict
    mean_mape: float
    sd_mape: float
    fold_mapes: tuple[float, ...]


@dataclass
class TuneResult:
    algorithm: str
    rows: list[ComboScore]
    best: ComboScore

    @property
    def best_params(self) -> dict:
        return dict(self.best.params)


def _tie_key(row: ComboScore):
    p = row.params
    return (row.mean_mape, p.get("t") or 0, p.get("d") or 0, -(p.get("L") or 0.0))


def _model_params(algorithm: str, group: dict, fixed: dict, t: Optional[int]) -> dict:
    params = dict(DEFAULT_PARAMS[algorithm])
    params.update(fixed)
    params.update(group)
    if t is not None:
        params["t"] = t
    return params


def _fold_task(args):
    ds_X, ds_y, seg, train_idx, test_idx, algorithm, params, t_values, seed = args
    model = fit_model(algorithm, ds_X[train_idx], ds_y[train_idx], params, seed)
    Xt, yt, st = ds_X[test_idx], ds_y[test_idx], seg[test_idx]
    if t_values == [None]:
        preds = predict(model, Xt)[None, :]
    else:
        preds = staged_predict(model, Xt, t_values)
    return [segment_mape(yt, p, st)[0] for p in preds]


def _check_folds(ds: SupervisedDataset, folds) -> None:
    segs = set(ds.segment_id)
    for f, idx in enumerate(folds):
        lacking = segs - set(ds.segment_id[idx])
        if lacking:
            logger.warning("fold %d has no rows for %s; omitted from that fold's average", f, ", ".join(sorted(lacking)))


def _run_tasks(tasks, workers: int):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_fold_task, tasks))
    return [_fold_task(t) for t in tasks]


def cv_surface(ds: SupervisedDataset, algorithm: str, group: dict, t_values: Sequence[Optional[int]],
               k: int = 5, seed: int = 0, fixed: Optional[dict] = None, workers: int = 1) -> np.ndarray:
    """Fold MAPEs, shape ``(len(t_values), k)``, from one fit per fold at ``max(t_values)``."""
    folds = kfold_split(len(ds), k, seed)
    _check_folds(ds, folds)
    t_values = list(t_values)
    t_fit = None if t_values == [None] else max(t_values)
    params = _model_params(algorithm, group, fixed or {}, t_fit)
    all_idx = np.arange(len(ds))
    tasks = [(ds.X, ds.y, ds.segment_id, np.setdiff1d(all_idx, folds[f]), folds[f], algorithm, params,
              t_values, fold_seed(seed, f)) for f in range(k)]
    return np.array(_run_tasks(tasks, workers)).T


def cv_score(ds: SupervisedDataset, algorithm: str, params: Optional[dict] = None, k: int = 5,
             seed: int = 0, workers: int = 1) -> float:
    """Mean k-fold CV MAPE of one parameter setting (segments averaged, then folds)."""
    params = dict(params or {})
    t = params.pop("t", None) if "t" in RELEVANT[algorithm] else None
    if "t" in RELEVANT[algorithm] and t is None:
        t = DEFAULT_PARAMS[algorithm]["t"]
    surface = cv_surface(ds, algorithm, params, [t], k, seed, workers=workers)
    return float(surface[0].mean())


def grid_search(ds: SupervisedDataset, grid: GridSpec, workers: int = 1) -> TuneResult:
    """Score every combination of the grid; best = lowest mean MAPE.

    Ties go to the smallest t, then the smallest d, then the largest L.
    """
    if len(ds) < grid.k:
        raise ValidationError(f"dataset has {len(ds)} rows, fewer than k={grid.k}")
    folds = kfold_split(len(ds), grid.k, grid.seed)
    _check_folds(ds, folds)
    ts = grid.ts()
    t_fit = None if ts == [None] else max(ts)
    all_idx = np.arange(len(ds))
    groups = grid.fit_groups()
    tasks = []
    for g in groups:
        params = _model_params(grid.algorithm, g, grid.fixed, t_fit)
        for f in range(grid.k):
            tasks.append((ds.X, ds.y, ds.segment_id, np.setdiff1d(all_idx, folds[f]), folds[f],
                          grid.algorithm, params, ts, fold_seed(grid.seed, f)))
    results = _run_tasks(tasks, workers)
    rows = []
    for gi, g in enumerate(groups):
        fold_vals = np.array(results[gi * grid.k:(gi + 1) * grid.k])  # (k, len(ts))
        for ti, t in enumerate(ts):
            vals = fold_vals[:, ti]
            params = {"t": t, "L": g.get("L"), "d": g.get("d")}
            rows.append(ComboScore(params, float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                                   tuple(float(v) for v in vals)))
    best = min(rows, key=_tie_key)
    return TuneResult(grid.algorithm, rows, best)


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_tune_csv(path: str | Path, result: TuneResult) -> None:
    k = len(result.best.fold_mapes)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "t", "L", "d", "mean_mape", "sd_mape"] + [f"fold_{f + 1}" for f in range(k)]
                   + ["best"])
        for row in result.rows:
            p = row.params
            w.writerow([result.algorithm, _fmt(p.get("t")), _fmt(p.get("L")), _fmt(p.get("d")),
                        _fmt(row.mean_mape), _fmt(row.sd_mape)] + [_fmt(v) for v in row.fold_mapes]
                       + [int(row is result.best)])


_LIST_KEYS = {"t": "t_values", "L": "L_values", "d": "d_values"}
_ALIASES = {"lr": "L", "learning_rate": "L", "depth": "d", "max_depth": "d", "trees": "t", "n_trees": "t",
            "lambda": "lam"}


def _parse_values(text: str, cast):
    out = []
    for tok in re.split(r"[,\s]+", text.strip()):
        if not tok:
            continue
        if ".." in tok:
            a, b = tok.split("..", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(cast(tok))
    return out


def parse_grid_config(text: str, algorithm: str, k: int = 5, seed: int = 0) -> GridSpec:
    """Parse ``key = v1, v2, a..b`` lines (``#`` starts a comment).

    ``t``, ``L`` and ``d`` are grid axes; ``k`` and ``seed`` set the CV; any
    other key (``lam``, ``gamma``, ``min_leaf``, ``mtry``) is held fixed.
    """
    values: dict = {}
    fixed: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"grid config line {lineno}: expected 'key = values'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        try:
            if key in ("t", "d"):
                values[_LIST_KEYS[key]] = _parse_values(val, int)
            elif key == "L":
                values["L_values"] = _parse_values(val, float)
            elif key == "k":
                k = int(val)
            elif key == "seed":
                seed = int(val)
            elif key in ("lam", "gamma"):
                fixed[key] = float(val)
            elif key in ("min_leaf", "mtry"):
                fixed[key] = int(val)
            else:
                raise FormatError(f"grid config line {lineno}: unknown key {key!r}")
        except ValueError:
            raise FormatError(f"grid config line {lineno}: bad value {val!r}") from None
    if "t" in RELEVANT.get(algorithm, ()) and "t_values" not in values:
        raise ValidationError("grid config must list explicit t values")
    return GridSpec(algorithm, k=k, seed=seed, fixed=fixed, **values)


def chronological_split(ds: SupervisedDataset, train_frac: float = 0.75,
                        shuffle: bool = False, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Earliest ``train_frac`` of rows (by target time, then segment) for training."""
    if not 0 < train_frac < 1:
        raise ValidationError("train_frac must be in (0, 1)")
    n = len(ds)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.lexsort((ds.segment_id.astype(str), ds.target_start))
    cut = int(math.floor(train_frac * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def split_peak(ds: SupervisedDataset, peak_windows: Sequence[tuple[float, float]] = DEFAULT_PEAKS,
               ) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (peak, non-peak) by the local hour of each target interval."""
    hour = local_hour_fraction(ds.target_start, ds.tz_offset_min)
    peak = np.zeros(len(ds), dtype=bool)
    for a, b in peak_windows:
        peak |= (hour >= a) & (hour < b)
    return np.flatnonzero(peak), np.flatnonzero(~peak)


@dataclass
class HorizonResult:
    algorithm: str
    horizon: int
    mape: float
    train_mape: float
    per_segment: dict
    by_period: dict  # period -> {segment_id | "ALL": mape}
    test: SupervisedDataset
    predicted: np.ndarray


def evaluate_horizons(m: TravelTimeMatrix, algorithm: str, params: Optional[dict] = None,
                      horizons: Sequence[int] = (1, 2, 3, 4, 5, 6), omega: int = 3, seed: int = 0,
                      train_frac: float = 0.75, peak_windows: Sequence[tuple[float, float]] = DEFAULT_PEAKS,
                      spatial: bool = False, neighbor_map: Optional[dict] = None,
                      shuffle: bool = False, workers: int = 1) -> list[HorizonResult]:
    """Train one model per horizon on the early split and score the late split.

    ``mape`` is the mean over segments of the per-segment test MAPE.
    """
    out = []
    for h in horizons:
        spec = FeatureSpec(omega, int(h), spatial, neighbor_map or {})
        ds = build_supervised(m, spec)
        if len(ds) < 2:
            raise ValidationError(f"horizon {h}: not enough rows to evaluate")
        tr, te = chronological_split(ds, train_frac, shuffle, seed)
        model = fit_model(algorithm, ds.X[tr], ds.y[tr], params, seed, workers)
        test = ds.subset(te)
        pred = predict(model, test.X)
        overall, per_seg = segment_mape(test.y, pred, test.segment_id)
        train_mape = segment_mape(ds.y[tr], predict(model, ds.X[tr]), ds.segment_id[tr])[0]
        by_period = {}
        peak, off = split_peak(test, peak_windows)
        for name, idx in (("peak", peak), ("non-peak", off)):
            if len(idx) == 0:
                continue
            allv, segs = segment_mape(test.y[idx], pred[idx], test.segment_id[idx])
            by_period[name] = dict(segs, ALL=allv)
        out.append(HorizonResult(algorithm, int(h), overall, train_mape, per_seg, by_period, test, pred))
    return out
