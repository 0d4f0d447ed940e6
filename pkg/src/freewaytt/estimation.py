"""Travel-time estimation from BSM streams.

The pipeline mirrors a deployment in which several processing nodes each own
a geographic slice of the network:

1. reduce raw SPMD-shaped rows to the eight retained fields (:func:`read_bsm`),
2. route every stamp to a longitude slice (:func:`partition_keys`),
3. per slice, map-match stamps and accumulate per (segment, 5-min interval)
   sums (:func:`aggregate_partition`),
4. fold the slices together (:func:`merge_partitions`),
5. convert mean speeds to travel times over the daily window (:func:`build_matrix`)
   and fill gaps (:func:`interpolate_missing`).

Cell sums are kept as exact floating-point expansions, so a merged cell is
bit-identical to the cell computed from the unpartitioned stream no matter
how the stamps were split or in which order the partials arrive.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import FormatError, ValidationError
from .geodata import DEFAULT_MAX_DIST_M, DEFAULT_MAX_HEADING_DELTA_DEG, Segment, match_arrays

logger = logging.getLogger(__name__)

INTERVAL_S = 300
DEFAULT_V_FLOOR_MPS = 0.5
DEFAULT_DAY_WINDOW = (5, 20)
MAX_MALFORMED_FRACTION = 0.5

SPMD_COLUMNS = ("Device", "GPS_Time", "Latitude", "Longitude", "Heading", "Speed", "Ax", "Ay")
REDUCED_COLUMNS = ("device_id", "time_s", "lat", "lon", "heading_deg", "speed_mps", "ax", "ay")
MATRIX_HEADER = ("segment_id", "interval_start_epoch", "tt_s", "mean_ax", "mean_ay", "n_stamps", "interpolated")


@dataclass(frozen=True)
class BsmRecord:
    device_id: str
    time_s: float
    lat: float
    lon: float
    heading_deg: float
    speed_mps: float
    ax: float
    ay: float


@dataclass
class BsmBlock:
    """Columnar batch of BSM records (same fields as :class:`BsmRecord`)."""

    device_id: np.ndarray
    time_s: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    heading_deg: np.ndarray
    speed_mps: np.ndarray
    ax: np.ndarray
    ay: np.ndarray

    def __len__(self) -> int:
        return len(self.time_s)

    def take(self, idx) -> "BsmBlock":
        return BsmBlock(*(getattr(self, f)[idx] for f in REDUCED_COLUMNS))

    def records(self) -> Iterator[BsmRecord]:
        for i in range(len(self)):
            yield BsmRecord(str(self.device_id[i]), *(float(getattr(self, f)[i]) for f in REDUCED_COLUMNS[1:]))

    @classmethod
    def empty(cls) -> "BsmBlock":
        return cls(np.array([], dtype=object), *(np.array([], dtype=float) for _ in range(7)))

    @classmethod
    def concat(cls, blocks: Sequence["BsmBlock"]) -> "BsmBlock":
        if not blocks:
            return cls.empty()
        return cls(*(np.concatenate([getattr(b, f) for b in blocks]) for f in REDUCED_COLUMNS))

    @classmethod
    def from_records(cls, records: Iterable[BsmRecord]) -> "BsmBlock":
        recs = list(records)
        if not recs:
            return cls.empty()
        return cls(np.array([r.device_id for r in recs], dtype=object),
                   *(np.array([getattr(r, f) for r in recs], dtype=float) for f in REDUCED_COLUMNS[1:]))


@dataclass
class ReductionReport:
    rows_read: int = 0
    rows_kept: int = 0

    @property
    def rows_dropped(self) -> int:
        return self.rows_read - self.rows_kept

    def __iadd__(self, other: "ReductionReport") -> "ReductionReport":
        self.rows_read += other.rows_read
        self.rows_kept += other.rows_kept
        return self


def _resolve_columns(path: Path) -> list[str] | None:
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        return None
    header = [h.strip() for h in header]
    for names in (SPMD_COLUMNS, REDUCED_COLUMNS):
        if set(names) <= set(header):
            return list(names)
    raise FormatError(f"{path}: header lacks required columns {list(SPMD_COLUMNS)} "
                      f"(or reduced form {list(REDUCED_COLUMNS)})")


def _count_data_lines(path: Path) -> int:
    with path.open("rb") as fh:
        n = sum(1 for line in fh if line.strip())
    return max(n - 1, 0)


def read_bsm(path: str | Path, report: ReductionReport | None = None,
             chunksize: int = 250_000) -> Iterator[BsmBlock]:
    """Stream a BSM CSV as columnar blocks, keeping only the eight retained fields.

    Columns are addressed by name; extra columns are ignored. Rows with
    unparseable or out-of-range values are dropped and counted in ``report``.
    Raises :class:`FormatError` once the stream is exhausted if more than half
    of the rows were malformed.
    """
    path = Path(path)
    report = report if report is not None else ReductionReport()
    columns = _resolve_columns(path)
    if columns is None:
        return
    local = ReductionReport(rows_read=_count_data_lines(path))
    reader = pd.read_csv(path, usecols=columns, dtype=str, chunksize=chunksize,
                         on_bad_lines="skip", skipinitialspace=True, keep_default_na=False)
    with reader:
        for chunk in reader:
            num = {c: pd.to_numeric(chunk[c], errors="coerce").to_numpy(dtype=float) for c in columns[1:]}
            t, lat, lon, hd, sp, ax, ay = (num[c] for c in columns[1:])
            dev = chunk[columns[0]].to_numpy(dtype=object)
            ok = (np.isfinite(t) & np.isfinite(ax) & np.isfinite(ay)
                  & (lat >= -90) & (lat <= 90) & (lon >= -180) & (lon <= 180)
                  & (hd >= 0) & (hd < 360) & (sp >= 0) & np.isfinite(sp)
                  & (dev != ""))
            local.rows_kept += int(ok.sum())
            yield BsmBlock(dev[ok], t[ok], lat[ok], lon[ok], hd[ok], sp[ok], ax[ok], ay[ok])
    report += local
    logger.info("%s: read %d rows, kept %d, dropped %d", path, local.rows_read, local.rows_kept, local.rows_dropped)
    if local.rows_read and local.rows_dropped > MAX_MALFORMED_FRACTION * local.rows_read:
        raise FormatError(f"{path}: {local.rows_dropped} of {local.rows_read} rows malformed; wrong file?")


def parse_bsm(path: str | Path, report: ReductionReport | None = None) -> Iterator[BsmRecord]:
    """Yield :class:`BsmRecord` objects in file order."""
    for block in read_bsm(path, report):
        yield from block.records()


def read_bsm_files(paths: Iterable[str | Path]) -> tuple[BsmBlock, ReductionReport]:
    report = ReductionReport()
    blocks = []
    for p in paths:
        blocks.extend(read_bsm(p, report))
    return BsmBlock.concat(blocks), report


def partition_keys(lon, n_partitions: int, bbox: tuple[float, float, float, float]) -> np.ndarray:
    """Longitude-slice index for each stamp; stamps outside ``bbox`` are clamped.

    A zero-width bbox (a due north-south corridor) is padded by 0.001 degrees.
    """
    if n_partitions < 1:
        raise ValidationError("n_partitions must be >= 1")
    _, _, lon_min, lon_max = bbox
    if not lon_max > lon_min:
        lon_min, lon_max = lon_min - 1e-3, lon_max + 1e-3
    frac = (np.asarray(lon, dtype=float) - lon_min) / (lon_max - lon_min)
    return np.clip(np.floor(frac * n_partitions), 0, n_partitions - 1).astype(np.int64)


def partition_key(record: BsmRecord, n_partitions: int, bbox: tuple[float, float, float, float]) -> int:
    return int(partition_keys([record.lon], n_partitions, bbox)[0])


def segments_bbox(segments: Sequence[Segment]) -> tuple[float, float, float, float]:
    lats = [v[0] for s in segments for v in s.vertices]
    lons = [v[1] for s in segments for v in s.vertices]
    return min(lats), max(lats), min(lons), max(lons)


def exact_partials(values) -> tuple[float, ...]:
    """Non-overlapping floats whose exact (real-number) sum equals ``sum(values)``.

    ``math.fsum`` returns the correctly rounded exact sum; peeling off that
    rounded value and repeating on the remainder leaves an expansion that can
    be merged with other expansions without any rounding.
    """
    vals = values if isinstance(values, (list, tuple)) else list(values)
    parts: list[float] = []
    rest = math.fsum(vals)
    while rest != 0.0:
        if not math.isfinite(rest):
            raise ValidationError("non-finite value in cell sum")
        parts.append(rest)
        rest = math.fsum(itertools.chain(vals, (-p for p in parts)))
        if len(parts) > 64:  # pragma: no cover - cannot happen for finite doubles
            raise RuntimeError("exact summation did not converge")
    return tuple(parts)


@dataclass(frozen=True)
class IntervalAggregate:
    """Per (segment, 5-min interval) accumulator.

    The ``*_sum`` fields are exact expansions (see :func:`exact_partials`).
    """

    segment_id: str
    interval_index: int
    n_stamps: int
    speed_sum: tuple[float, ...] = field(repr=False)
    ax_sum: tuple[float, ...] = field(repr=False)
    ay_sum: tuple[float, ...] = field(repr=False)

    @property
    def mean_speed_mps(self) -> float:
        return math.fsum(self.speed_sum) / self.n_stamps

    @property
    def mean_ax(self) -> float:
        return math.fsum(self.ax_sum) / self.n_stamps

    @property
    def mean_ay(self) -> float:
        return math.fsum(self.ay_sum) / self.n_stamps

    @classmethod
    def from_means(cls, segment_id: str, interval_index: int, mean_speed_mps: float,
                   mean_ax: float, mean_ay: float, n_stamps: int) -> "IntervalAggregate":
        if n_stamps < 1:
            raise ValidationError("n_stamps must be >= 1")
        return cls(segment_id, interval_index, n_stamps,
                   exact_partials([mean_speed_mps] * n_stamps),
                   exact_partials([mean_ax] * n_stamps),
                   exact_partials([mean_ay] * n_stamps))


def aggregate_partition(records, segments: Sequence[Segment],
                        max_dist_m: float = DEFAULT_MAX_DIST_M,
                        max_heading_delta_deg: float = DEFAULT_MAX_HEADING_DELTA_DEG,
                        ) -> tuple[list[IntervalAggregate], int]:
    """Map-match one partition and aggregate it per (segment, interval).

    ``records`` is a :class:`BsmBlock` or an iterable of :class:`BsmRecord`.
    Returns the aggregates sorted by (segment_id, interval_index) and the
    number of stamps no segment accepted.
    """
    block = records if isinstance(records, BsmBlock) else BsmBlock.from_records(records)
    if len(block) == 0:
        return [], 0
    ids = sorted(s.id for s in segments)
    rank, _, _ = match_arrays(block.lat, block.lon, block.heading_deg, segments,
                              max_dist_m, max_heading_delta_deg)
    hit = rank >= 0
    n_unmatched = int((~hit).sum())
    rank = rank[hit]
    cell = np.floor(block.time_s[hit] / INTERVAL_S).astype(np.int64)
    speed, ax, ay = block.speed_mps[hit], block.ax[hit], block.ay[hit]
    order = np.lexsort((cell, rank))
    rank, cell, speed, ax, ay = rank[order], cell[order], speed[order], ax[order], ay[order]
    out = []
    if len(rank):
        brk = np.flatnonzero((np.diff(rank) != 0) | (np.diff(cell) != 0)) + 1
        starts = np.concatenate([[0], brk])
        stops = np.concatenate([brk, [len(rank)]])
        for a, b in zip(starts, stops):
            out.append(IntervalAggregate(ids[rank[a]], int(cell[a]), int(b - a),
                                         exact_partials(speed[a:b].tolist()),
                                         exact_partials(ax[a:b].tolist()),
                                         exact_partials(ay[a:b].tolist())))
    return out, n_unmatched


def merge_partitions(parts: Sequence[Sequence[IntervalAggregate]]) -> list[IntervalAggregate]:
    """Combine partition outputs; cells sharing a key are pooled exactly."""
    grouped: dict[tuple[str, int], list[IntervalAggregate]] = {}
    for part in parts:
        for agg in part:
            grouped.setdefault((agg.segment_id, agg.interval_index), []).append(agg)
    out = []
    for key in sorted(grouped):
        aggs = grouped[key]
        if len(aggs) == 1:
            out.append(aggs[0])
            continue
        out.append(IntervalAggregate(
            key[0], key[1], sum(a.n_stamps for a in aggs),
            exact_partials([p for a in aggs for p in a.speed_sum]),
            exact_partials([p for a in aggs for p in a.ax_sum]),
            exact_partials([p for a in aggs for p in a.ay_sum])))
    return out


def local_day(interval_index, tz_offset_min: int = 0):
    return np.floor_divide(np.asarray(interval_index) * INTERVAL_S + tz_offset_min * 60, 86400)


def local_second_of_day(interval_index, tz_offset_min: int = 0):
    return np.mod(np.asarray(interval_index) * INTERVAL_S + tz_offset_min * 60, 86400)


def window_intervals(days: Iterable[int], day_window: tuple[int, int], tz_offset_min: int = 0) -> np.ndarray:
    """Absolute interval indices whose local start time lies in the daily window."""
    start_h, end_h = day_window
    out = []
    for day in days:
        lo = day * 86400 + start_h * 3600 - tz_offset_min * 60
        hi = day * 86400 + end_h * 3600 - tz_offset_min * 60
        out.append(np.arange(-(-lo // INTERVAL_S), -(-hi // INTERVAL_S), dtype=np.int64))
    return np.concatenate(out) if out else np.array([], dtype=np.int64)


@dataclass
class TravelTimeMatrix:
    """Segments x in-window 5-min intervals.

    Column ``j`` covers ``[interval_index[j]*300, interval_index[j]*300 + 300)``
    epoch seconds. Missing cells hold NaN in the float grids.
    """

    segment_ids: list[str]
    interval_index: np.ndarray
    tt_s: np.ndarray
    mean_ax: np.ndarray
    mean_ay: np.ndarray
    n_stamps: np.ndarray
    interpolated: np.ndarray
    tz_offset_min: int = 0
    day_window: tuple[int, int] = DEFAULT_DAY_WINDOW

    @property
    def n_intervals(self) -> int:
        return len(self.interval_index)

    @property
    def interval_start(self) -> int:
        return int(self.interval_index[0]) * INTERVAL_S if self.n_intervals else 0

    @property
    def interval_starts(self) -> np.ndarray:
        return self.interval_index * INTERVAL_S

    @property
    def column_day(self) -> np.ndarray:
        return local_day(self.interval_index, self.tz_offset_min)

    def day_slices(self) -> list[np.ndarray]:
        """Column indices grouped by local day, in time order."""
        days = self.column_day
        return [np.flatnonzero(days == d) for d in np.unique(days)]

    def copy(self) -> "TravelTimeMatrix":
        return TravelTimeMatrix(list(self.segment_ids), self.interval_index.copy(), self.tt_s.copy(),
                                self.mean_ax.copy(), self.mean_ay.copy(), self.n_stamps.copy(),
                                self.interpolated.copy(), self.tz_offset_min, self.day_window)

    def segment_row(self, segment_id: str) -> int:
        return self.segment_ids.index(segment_id)


def build_matrix(aggregates: Sequence[IntervalAggregate], segments: Sequence[Segment],
                 day_window: tuple[int, int] = DEFAULT_DAY_WINDOW, tz_offset_min: int = 0,
                 v_floor: float = DEFAULT_V_FLOOR_MPS) -> TravelTimeMatrix:
    """Cell travel time = segment length / max(mean speed, v_floor), daily window only."""
    start_h, end_h = day_window
    if not 0 <= start_h < end_h <= 24:
        raise ValidationError(f"bad day window {day_window}")
    by_id = {s.id: s for s in segments}
    unknown = sorted({a.segment_id for a in aggregates} - set(by_id))
    if unknown:
        raise ValidationError(f"aggregates reference unknown segments: {', '.join(unknown)}")
    seg_ids = [s.id for s in segments]
    if aggregates:
        days = local_day(np.array([a.interval_index for a in aggregates]), tz_offset_min)
        cols = window_intervals(range(int(days.min()), int(days.max()) + 1), day_window, tz_offset_min)
    else:
        cols = np.array([], dtype=np.int64)
    shape = (len(seg_ids), len(cols))
    m = TravelTimeMatrix(seg_ids, cols, np.full(shape, np.nan), np.full(shape, np.nan), np.full(shape, np.nan),
                         np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=bool), tz_offset_min, day_window)
    col_of = {int(k): j for j, k in enumerate(cols)}
    row_of = {sid: i for i, sid in enumerate(seg_ids)}
    for a in aggregates:
        j = col_of.get(a.interval_index)
        if j is None:
            continue
        i = row_of[a.segment_id]
        m.tt_s[i, j] = by_id[a.segment_id].length_km * 1000.0 / max(a.mean_speed_mps, v_floor)
        m.mean_ax[i, j] = a.mean_ax
        m.mean_ay[i, j] = a.mean_ay
        m.n_stamps[i, j] = a.n_stamps
    return m


def interpolate_missing(m: TravelTimeMatrix) -> TravelTimeMatrix:
    """Fill missing cells per segment-day: linear inside, nearest value at the ends.

    Segment-days without a single observation stay missing and are logged.
    """
    out = m.copy()
    for cols in m.day_slices():
        x = m.interval_index[cols].astype(float)
        for i, sid in enumerate(m.segment_ids):
            row = m.tt_s[i, cols]
            present = np.isfinite(row)
            if present.all():
                continue
            if not present.any():
                logger.warning("segment %s has no observations on local day %d; left missing",
                               sid, int(m.column_day[cols[0]]))
                continue
            fill = cols[~present]
            for grid in (out.tt_s, out.mean_ax, out.mean_ay):
                src = grid[i, cols]
                ok = np.isfinite(src)
                grid[i, fill] = np.interp(m.interval_index[fill].astype(float), x[ok], src[ok])
            out.interpolated[i, fill] = True
    return out


def missing_segment_days(m: TravelTimeMatrix) -> list[tuple[str, int]]:
    out = []
    for cols in m.day_slices():
        for i, sid in enumerate(m.segment_ids):
            if not np.isfinite(m.tt_s[i, cols]).any():
                out.append((sid, int(m.column_day[cols[0]])))
    return out


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def write_matrix_csv(path: str | Path, m: TravelTimeMatrix) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATRIX_HEADER)
        starts = m.interval_starts
        for i, sid in enumerate(m.segment_ids):
            for j in range(m.n_intervals):
                w.writerow([sid, int(starts[j]), _fmt(m.tt_s[i, j]), _fmt(m.mean_ax[i, j]),
                            _fmt(m.mean_ay[i, j]), int(m.n_stamps[i, j]), int(m.interpolated[i, j])])


def read_matrix_csv(path: str | Path, tz_offset_min: int = 0,
                    day_window: tuple[int, int] = DEFAULT_DAY_WINDOW) -> TravelTimeMatrix:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(MATRIX_HEADER) <= set(reader.fieldnames):
            raise FormatError(f"{path}: matrix header must be {','.join(MATRIX_HEADER)}")
        rows = list(reader)
    seg_ids: list[str] = []
    for r in rows:
        if not seg_ids or seg_ids[-1] != r["segment_id"]:
            if r["segment_id"] not in seg_ids:
                seg_ids.append(r["segment_id"])
    try:
        starts = sorted({int(r["interval_start_epoch"]) for r in rows})
    except ValueError as exc:
        raise FormatError(f"{path}: bad interval_start_epoch ({exc})") from None
    cols = np.array([s // INTERVAL_S for s in starts], dtype=np.int64)
    shape = (len(seg_ids), len(cols))
    m = TravelTimeMatrix(seg_ids, cols, np.full(shape, np.nan), np.full(shape, np.nan), np.full(shape, np.nan),
                         np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=bool), tz_offset_min, day_window)
    col_of = {s: j for j, s in enumerate(starts)}
    row_of = {s: i for i, s in enumerate(seg_ids)}

    def num(text: str, lineno: int) -> float:
        if text == "":
            return np.nan
        try:
            return float(text)
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: non-numeric value {text!r}") from None

    for lineno, r in enumerate(rows, start=2):
        i, j = row_of[r["segment_id"]], col_of[int(r["interval_start_epoch"])]
        m.tt_s[i, j] = num(r["tt_s"], lineno)
        m.mean_ax[i, j] = num(r["mean_ax"], lineno)
        m.mean_ay[i, j] = num(r["mean_ay"], lineno)
        m.n_stamps[i, j] = int(r["n_stamps"] or 0)
        m.interpolated[i, j] = r["interpolated"] in ("1", "true", "True")
    present = m.tt_s[np.isfinite(m.tt_s)]
    if (present <= 0).any():
        raise ValidationError(f"{path}: travel times must be positive")
    return m


@dataclass
class EstimationStats:
    rows_read: int = 0
    rows_kept: int = 0
    unmatched: int = 0
    matched: int = 0
    partition_sizes: list[int] = field(default_factory=list)

    @property
    def rows_dropped(self) -> int:
        return self.rows_read - self.rows_kept


def estimate(paths: Sequence[str | Path], segments: Sequence[Segment], n_partitions: int = 1,
             workers: int = 1, max_dist_m: float = DEFAULT_MAX_DIST_M,
             max_heading_delta_deg: float = DEFAULT_MAX_HEADING_DELTA_DEG,
             day_window: tuple[int, int] = DEFAULT_DAY_WINDOW, tz_offset_min: int = 0,
             v_floor: float = DEFAULT_V_FLOOR_MPS, interpolate: bool = True,
             ) -> tuple[TravelTimeMatrix, EstimationStats]:
    """Run the full estimation pipeline over one or more BSM files.

    The result does not depend on ``n_partitions`` or ``workers``.
    """
    block, report = read_bsm_files(sorted(str(p) for p in paths))
    keys = partition_keys(block.lon, n_partitions, segments_bbox(segments))
    parts = [block.take(np.flatnonzero(keys == p)) for p in range(n_partitions)]
    stats = EstimationStats(report.rows_read, report.rows_kept, partition_sizes=[len(p) for p in parts])
    args = [(p, segments, max_dist_m, max_heading_delta_deg) for p in parts]
    if workers > 1 and n_partitions > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_aggregate_star, args))
    else:
        results = [_aggregate_star(a) for a in args]
    stats.unmatched = sum(r[1] for r in results)
    merged = merge_partitions([r[0] for r in results])
    stats.matched = sum(a.n_stamps for a in merged)
    m = build_matrix(merged, segments, day_window, tz_offset_min, v_floor)
    if interpolate:
        m = interpolate_missing(m)
    return m, stats


def _aggregate_star(args):
    return aggregate_partition(*args)
