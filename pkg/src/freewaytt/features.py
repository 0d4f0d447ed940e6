"""Supervised datasets from a travel-time matrix.

A row predicting the cell at in-window position ``i + h - 1`` of one segment
and one local day carries::

    TT_i-1, ..., TT_i-omega, D, H [, TT_up, TT_down]

where ``D`` (1 = Monday .. 7 = Sunday) and ``H`` (1 = 05:00-05:59 .. 15 =
19:00-19:59) are taken from interval ``i - 1``, and the optional spatial
columns are the upstream/downstream segments' travel times at ``i - 1``.
Lags never cross the overnight gap between two day windows.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .estimation import INTERVAL_S, TravelTimeMatrix

logger = logging.getLogger(__name__)

MAX_OMEGA = 6
FIRST_HOUR = 5
LAST_HOUR = 20


def _local(timestamp, tz_offset_min: int):
    return np.asarray(timestamp, dtype=np.int64) + int(tz_offset_min) * 60


def day_index(timestamp, tz_offset_min: int = 0):
    """ISO weekday of the local date: Monday = 1 .. Sunday = 7."""
    days = np.floor_divide(_local(timestamp, tz_offset_min), 86400)
    # 1970-01-01 was a Thursday
    out = np.mod(days + 3, 7) + 1
    return int(out) if out.ndim == 0 else out


def hour_index(timestamp, tz_offset_min: int = 0):
    """1 for 05:00-05:59 local time through 15 for 19:00-19:59."""
    hours = np.floor_divide(np.mod(_local(timestamp, tz_offset_min), 86400), 3600)
    if np.any((hours < FIRST_HOUR) | (hours >= LAST_HOUR)):
        raise ValidationError("timestamp outside window: hour index is defined for 05:00-20:00 local time")
    out = hours - FIRST_HOUR + 1
    return int(out) if out.ndim == 0 else out


def local_hour_fraction(timestamp, tz_offset_min: int = 0):
    return np.mod(_local(timestamp, tz_offset_min), 86400) / 3600.0


@dataclass(frozen=True)
class FeatureSpec:
    omega: int = 3
    horizon_steps: int = 1
    spatial: bool = False
    neighbor_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.omega <= MAX_OMEGA:
            raise ValidationError(f"omega must be in 1..{MAX_OMEGA}")
        if self.horizon_steps < 1:
            raise ValidationError("horizon_steps must be >= 1")
        if self.spatial and not self.neighbor_map:
            raise ValidationError("spatial features need a neighbor map")

    @property
    def feature_names(self) -> list[str]:
        names = [f"TT_i-{k}" for k in range(1, self.omega + 1)] + ["D", "H"]
        if self.spatial:
            names += ["TT_up", "TT_down"]
        return names


@dataclass
class SupervisedDataset:
    feature_names: list[str]
    X: np.ndarray
    y: np.ndarray
    segment_id: np.ndarray
    target_start: np.ndarray
    last_lag_start: np.ndarray
    tz_offset_min: int = 0
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "SupervisedDataset":
        idx = np.asarray(idx)
        return SupervisedDataset(self.feature_names, self.X[idx], self.y[idx], self.segment_id[idx],
                                 self.target_start[idx], self.last_lag_start[idx], self.tz_offset_min)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]


def read_neighbors(path: str | Path) -> dict[str, tuple[Optional[str], Optional[str]]]:
    path = Path(path)
    out = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"segment_id", "upstream_id", "downstream_id"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise FormatError(f"{path}: neighbor header must be segment_id,upstream_id,downstream_id")
        for r in reader:
            out[r["segment_id"].strip()] = ((r["upstream_id"] or "").strip() or None,
                                            (r["downstream_id"] or "").strip() or None)
    return out


def build_supervised(m: TravelTimeMatrix, spec: FeatureSpec) -> SupervisedDataset:
    """One row per (segment, target interval) whose lags and target fall in one day window.

    Rows touching a still-missing cell, or (spatial) lacking a neighbour value,
    are dropped and counted in ``n_dropped``.
    """
    w, h = spec.omega, spec.horizon_steps
    names = spec.feature_names
    row_of = {s: i for i, s in enumerate(m.segment_ids)}
    if spec.spatial:
        missing = [s for s in m.segment_ids if s not in spec.neighbor_map]
        if missing:
            logger.warning("no neighbor entry for %s; their rows are dropped", ", ".join(missing))
    Xs, ys, segs, tstarts, lstarts = [], [], [], [], []
    dropped = 0
    any_day_long_enough = False
    starts_all = m.interval_starts
    for i, sid in enumerate(m.segment_ids):
        up = down = None
        if spec.spatial:
            up_id, down_id = spec.neighbor_map.get(sid, (None, None))
            up = row_of.get(up_id) if up_id else None
            down = row_of.get(down_id) if down_id else None
        for cols in m.day_slices():
            n = len(cols)
            count = n - w - h + 1
            if count <= 0:
                continue
            any_day_long_enough = True
            tt = m.tt_s[i, cols]
            pos = np.arange(w, w + count)
            lags = np.stack([tt[pos - k] for k in range(1, w + 1)], axis=1)
            target = tt[pos + h - 1]
            prev = starts_all[cols[pos - 1]]
            feats = [lags, day_index(prev, m.tz_offset_min)[:, None].astype(float),
                     hour_index(prev, m.tz_offset_min)[:, None].astype(float)]
            if spec.spatial:
                nan = np.full(count, np.nan)
                feats.append((m.tt_s[up, cols][pos - 1] if up is not None else nan)[:, None])
                feats.append((m.tt_s[down, cols][pos - 1] if down is not None else nan)[:, None])
            X = np.hstack(feats)
            ok = np.isfinite(X).all(axis=1) & np.isfinite(target)
            dropped += int((~ok).sum())
            Xs.append(X[ok])
            ys.append(target[ok])
            segs.append(np.full(int(ok.sum()), sid, dtype=object))
            tstarts.append(starts_all[cols[pos + h - 1]][ok])
            lstarts.append(prev[ok])
    if not any_day_long_enough:
        logger.warning("omega + horizon (%d) exceeds the daily window; dataset is empty", w + h)
    if Xs:
        ds = SupervisedDataset(names, np.vstack(Xs), np.concatenate(ys), np.concatenate(segs),
                               np.concatenate(tstarts).astype(np.int64), np.concatenate(lstarts).astype(np.int64),
                               m.tz_offset_min, dropped)
    else:
        ds = SupervisedDataset(names, np.empty((0, len(names))), np.empty(0), np.empty(0, dtype=object),
                               np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), m.tz_offset_min, dropped)
    if dropped:
        logger.info("dropped %d rows with missing lag, target or neighbour values", dropped)
    return ds


def write_dataset_csv(path: str | Path, ds: SupervisedDataset) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.feature_names + ["target", "segment_id", "interval_start"])
        for k in range(len(ds)):
            w.writerow([repr(float(v)) for v in ds.X[k]] + [repr(float(ds.y[k])), ds.segment_id[k],
                                                             int(ds.target_start[k])])


def read_dataset_csv(path: str | Path, tz_offset_min: int = 0) -> SupervisedDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[-3:] != ["target", "segment_id", "interval_start"]:
            raise FormatError(f"{path}: dataset header must end with target,segment_id,interval_start")
        names = header[:-3]
        X, y, seg, start = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                X.append([float(v) for v in row[:-3]])
                y.append(float(row[-3]))
                start.append(int(row[-1]))
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric field") from None
            seg.append(row[-2])
    Xa = np.array(X, dtype=float).reshape(len(X), len(names))
    start_a = np.array(start, dtype=np.int64)
    if not (np.isfinite(Xa).all() and np.isfinite(y).all()):
        raise ValidationError(f"{path}: dataset contains non-finite values")
    # the last lag precedes the target by the horizon, which the file does not record
    return SupervisedDataset(names, Xa, np.array(y, dtype=float), np.array(seg, dtype=object),
                             start_a, start_a - INTERVAL_S, tz_offset_min)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValidationError("pearson_r needs two equal-length series of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("pearson_r is undefined for a zero-variance series")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


SCREEN_GRIDS = {"TT": "tt_s", "Ax": "mean_ax", "Ay": "mean_ay"}


def screening_pairs(m: TravelTimeMatrix, candidate: str, shift: int = 1):
    """Per segment, (candidate at i, TT at i + shift) pairs within each day window."""
    if candidate not in SCREEN_GRIDS:
        raise ValidationError(f"unknown screening candidate {candidate!r}; expected one of {sorted(SCREEN_GRIDS)}")
    grid = getattr(m, SCREEN_GRIDS[candidate])
    out = {}
    for i, sid in enumerate(m.segment_ids):
        xs, ys = [], []
        for cols in m.day_slices():
            if len(cols) <= shift:
                continue
            a = grid[i, cols][: len(cols) - shift]
            b = m.tt_s[i, cols][shift:]
            ok = np.isfinite(a) & np.isfinite(b)
            xs.append(a[ok])
            ys.append(b[ok])
        out[sid] = (np.concatenate(xs) if xs else np.empty(0), np.concatenate(ys) if ys else np.empty(0))
    return out


def screen_features(m: TravelTimeMatrix, candidates: Iterable[str] = ("TT", "Ax", "Ay"),
                    shift: int = 1) -> list[dict]:
    """Pearson r of each candidate series against the travel time ``shift`` steps later.

    Returns rows ``{"candidate", "segment_id", "r", "n"}`` per segment plus a
    pooled row (``segment_id == "ALL"``). Undefined coefficients are NaN.
    Advisory only; nothing is dropped.
    """
    rows = []
    for cand in candidates:
        pairs = screening_pairs(m, cand, shift)
        for sid, (x, y) in pairs.items():
            rows.append({"candidate": cand, "segment_id": sid, "r": _safe_r(x, y), "n": len(x)})
        px = np.concatenate([p[0] for p in pairs.values()]) if pairs else np.empty(0)
        py = np.concatenate([p[1] for p in pairs.values()]) if pairs else np.empty(0)
        rows.append({"candidate": cand, "segment_id": "ALL", "r": _safe_r(px, py), "n": len(px)})
    return rows


def _safe_r(x, y) -> float:
    try:
        return pearson_r(x, y)
    except ValidationError:
        return float("nan")
