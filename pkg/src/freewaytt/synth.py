"""Seeded synthetic data standing in for SPMD recordings.

Two generators share one :class:`CongestionProfile`:

* :func:`generate_trajectories` writes an SPMD-shaped 10 Hz BSM file plus a
  sidecar of the true per-cell mean speed, for pipeline round trips;
* :func:`generate_matrix` skips the BSM layer and returns the travel-time
  matrix directly, for learner experiments.

Vehicles traverse one segment each at a constant speed; there is no
car-following or lane model.
"""

from __future__ import annotations

import calendar
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .estimation import DEFAULT_DAY_WINDOW, INTERVAL_S, TravelTimeMatrix, window_intervals
from .features import SupervisedDataset, local_hour_fraction
from .geodata import EARTH_RADIUS_M, Segment, haversine_m

SPMD_HEADER = ("Device", "FileId", "TxDevice", "GPS_Time", "TxRandom", "MsgCount", "DSecond", "Latitude",
               "Longitude", "Elevation", "Speed", "Heading", "Ax", "Ay", "Az", "Yawrate", "PathCount",
               "RadiusOfCurve", "Confidence")
TRUTH_HEADER = ("segment_id", "interval_index", "true_mean_speed_mps")
STAMP_DT = 0.1
DEFAULT_START = "2013-04-01"  # a Monday


def day_number(date: str, tz_offset_min: int = 0) -> int:
    """Local day number (days since 1970-01-01) of an ISO date."""
    y, m, d = (int(p) for p in date.split("-"))
    return calendar.timegm((y, m, d, 0, 0, 0)) // 86400


@dataclass(frozen=True)
class CongestionProfile:
    """Deterministic speed field over segments and time of day.

    ``base_speed_mps`` is a scalar or a per-segment mapping. Within each
    ``(start_hour, end_hour, multiplier)`` peak window the speed is scaled by
    ``multiplier``; ``diurnal_amplitude`` adds a smooth midday dip. Noise is
    relative (``noise_sd`` = SD as a fraction of speed); for matrices it
    follows an AR(1) process with coefficient ``ar_coef``. Speeds never drop
    below ``min_speed_mps``.
    """

    base_speed_mps: float | dict = 27.0
    peak_windows: tuple = ((6, 9, 0.6), (16, 19, 0.6))
    diurnal_amplitude: float = 0.0
    noise_sd: float = 0.0
    ar_coef: float = 0.0
    seed: int = 0
    min_speed_mps: float = 1.0
    accel_noise_sd: float = 0.1

    def __post_init__(self):
        for _, _, mult in self.peak_windows:
            if not 0 < mult <= 1:
                raise ValidationError("peak multipliers must be in (0, 1]")
        if not 0 <= self.ar_coef < 1:
            raise ValidationError("ar_coef must be in [0, 1)")
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be >= 0")

    def base(self, segment_id: str) -> float:
        if isinstance(self.base_speed_mps, dict):
            return float(self.base_speed_mps[segment_id])
        return float(self.base_speed_mps)

    def mean_speed(self, segment_id: str, epoch_s, tz_offset_min: int = 0) -> np.ndarray:
        """Noise-free speed at the given epoch seconds."""
        hour = local_hour_fraction(np.floor(np.asarray(epoch_s, dtype=float)).astype(np.int64), tz_offset_min)
        speed = np.full(hour.shape, self.base(segment_id))
        if self.diurnal_amplitude:
            speed = speed * (1.0 - self.diurnal_amplitude * np.sin(np.pi * np.clip((hour - 5) / 15, 0, 1)) ** 2)
        for a, b, mult in self.peak_windows:
            speed = np.where((hour >= a) & (hour < b), speed * mult, speed)
        return np.maximum(speed, self.min_speed_mps)


def demo_segments(n: int = 3, length_km: float = 0.8, start: tuple[float, float] = (42.30, -83.70),
                  bearing_deg: float = 180.0, prefix: str = "S", direction: str = "SB",
                  vertices_per_segment: int = 3) -> list[Segment]:
    """A straight chain of ``n`` consecutive segments heading ``bearing_deg``."""
    segs = []
    lat, lon = start
    step = length_km * 1000.0 / (vertices_per_segment - 1)
    br = math.radians(bearing_deg)
    for k in range(n):
        verts = [(lat, lon)]
        for _ in range(vertices_per_segment - 1):
            dlat = step * math.cos(br) / EARTH_RADIUS_M
            dlon = step * math.sin(br) / (EARTH_RADIUS_M * math.cos(math.radians(lat)))
            lat, lon = lat + math.degrees(dlat), lon + math.degrees(dlon)
            verts.append((round(lat, 7), round(lon, 7)))
        verts[0] = (round(verts[0][0], 7), round(verts[0][1], 7))
        lat, lon = verts[-1]
        segs.append(Segment(f"{prefix}{k + 1}", tuple(verts), direction))
    return segs


def _local_bearing(a, b) -> float:
    dx = (b[1] - a[1]) * math.cos(math.radians(a[0]))
    dy = b[0] - a[0]
    return math.degrees(math.atan2(dx, dy)) % 360.0


def _fmt_heading(b: float) -> str:
    text = f"{b:.2f}"
    return "0.00" if float(text) >= 360.0 else text


@dataclass
class TrajectoryStats:
    vehicles: int = 0
    stamps: int = 0
    truth: dict = field(default_factory=dict)  # (segment_id, interval_index) -> mean speed


def generate_trajectories(segments: Sequence[Segment], profile: CongestionProfile, vehicles_per_interval: int,
                          days: int, bsm_path: str | Path, truth_path: Optional[str | Path] = None,
                          start_date: str = DEFAULT_START, day_window: tuple[int, int] = DEFAULT_DAY_WINDOW,
                          tz_offset_min: int = 0) -> TrajectoryStats:
    """Write an SPMD-shaped 10 Hz BSM CSV (and the ground-truth sidecar).

    In every in-window 5-minute interval, ``vehicles_per_interval`` vehicles
    enter each segment at jittered times and drive its polyline at the
    profile speed (times ``1 + noise_sd * N(0, 1)``, per vehicle). The sidecar
    holds the mean of the emitted (rounded) speeds per (segment, interval).
    """
    if vehicles_per_interval < 0 or days < 1:
        raise ValidationError("need vehicles_per_interval >= 0 and days >= 1")
    rng = np.random.default_rng(profile.seed)
    first_day = day_number(start_date)
    intervals = window_intervals(range(first_day, first_day + days), day_window, tz_offset_min)
    in_window = set(intervals.tolist())
    geom = []
    for s in segments:
        cum = np.concatenate([[0.0], np.cumsum([haversine_m(a, b) for a, b in zip(s.vertices[:-1], s.vertices[1:])])])
        headings = [_local_bearing(a, b) for a, b in zip(s.vertices[:-1], s.vertices[1:])]
        geom.append((s, cum, s.lats, s.lons, headings))
    stats = TrajectoryStats()
    sums: dict[tuple[str, int], list] = {}
    device = 10000
    with Path(bsm_path).open("w", newline="") as fh:
        fh.write(",".join(SPMD_HEADER) + "\n")
        for k in intervals:
            t_int = int(k) * INTERVAL_S
            for s, cum, lats, lons, headings in geom:
                for v in range(vehicles_per_interval):
                    jitter = rng.uniform()
                    speed_noise = rng.standard_normal()
                    t0 = round((t_int + (v + jitter) * INTERVAL_S / vehicles_per_interval) * 10) / 10
                    speed = float(profile.mean_speed(s.id, t0, tz_offset_min))
                    speed = max(speed * (1.0 + profile.noise_sd * speed_noise), profile.min_speed_mps)
                    speed_txt = f"{speed:.3f}"
                    speed_val = float(speed_txt)
                    length = cum[-1]
                    n = int(math.ceil(length / (speed_val * STAMP_DT) - 0.5))
                    dist = speed_val * STAMP_DT * (np.arange(n) + 0.5)
                    dist = dist[dist < length]
                    n = len(dist)
                    edge = np.clip(np.searchsorted(cum, dist, side="right") - 1, 0, len(cum) - 2)
                    frac = (dist - cum[edge]) / (cum[edge + 1] - cum[edge])
                    lat = lats[edge] + frac * (lats[edge + 1] - lats[edge])
                    lon = lons[edge] + frac * (lons[edge + 1] - lons[edge])
                    ax = rng.normal(0.0, profile.accel_noise_sd, n)
                    ay = rng.normal(0.0, profile.accel_noise_sd, n)
                    device += 1
                    for i in range(n):
                        t_txt = f"{t0 + i * STAMP_DT:.1f}"
                        cell = int(math.floor(float(t_txt) / INTERVAL_S))
                        if cell in in_window:
                            sums.setdefault((s.id, cell), []).append(speed_val)
                        fh.write(f"{device},1,{device},{t_txt},0,{i % 128},0,{lat[i]:.7f},{lon[i]:.7f},250.0,"
                                 f"{speed_txt},{_fmt_heading(headings[edge[i]])},{ax[i]:.4f},{ay[i]:.4f},"
                                 f"0.0,0.0,0,0,1\n")
                    stats.vehicles += 1
                    stats.stamps += n
    order = {s.id: i for i, s in enumerate(segments)}
    stats.truth = {key: math.fsum(vals) / len(vals) for key, vals in sums.items()}
    if truth_path is not None:
        with Path(truth_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRUTH_HEADER)
            for (sid, cell) in sorted(stats.truth, key=lambda kc: (order[kc[0]], kc[1])):
                w.writerow([sid, cell, repr(stats.truth[(sid, cell)])])
    return stats


def read_truth_csv(path: str | Path) -> dict[tuple[str, int], float]:
    with Path(path).open(newline="") as fh:
        return {(r["segment_id"], int(r["interval_index"])): float(r["true_mean_speed_mps"])
                for r in csv.DictReader(fh)}


def generate_matrix(profile: CongestionProfile, segments: Sequence[Segment], days: int,
                    start_date: str = DEFAULT_START, day_window: tuple[int, int] = DEFAULT_DAY_WINDOW,
                    tz_offset_min: int = 0) -> TravelTimeMatrix:
    """Travel-time matrix straight from the profile (no cell is interpolated).

    Relative speed noise follows an AR(1) series per segment that runs
    through each day window and restarts every day. ``n_stamps`` is 0
    throughout since no stamps exist.
    """
    if days < 1:
        raise ValidationError("days must be >= 1")
    rng = np.random.default_rng(profile.seed)
    first_day = day_number(start_date)
    cols = window_intervals(range(first_day, first_day + days), day_window, tz_offset_min)
    starts = cols * INTERVAL_S
    shape = (len(segments), len(cols))
    tt = np.empty(shape)
    m = TravelTimeMatrix([s.id for s in segments], cols, tt, np.empty(shape), np.empty(shape),
                         np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=bool), tz_offset_min, day_window)
    day_of = m.column_day
    phi = profile.ar_coef
    innov = math.sqrt(1.0 - phi * phi) * profile.noise_sd
    for i, s in enumerate(segments):
        base = profile.mean_speed(s.id, starts, tz_offset_min)
        eps = rng.standard_normal(len(cols))
        noise = np.empty(len(cols))
        for j in range(len(cols)):
            if j == 0 or day_of[j] != day_of[j - 1]:
                noise[j] = profile.noise_sd * eps[j]
            else:
                noise[j] = phi * noise[j - 1] + innov * eps[j]
        speed = np.maximum(base * (1.0 + noise), profile.min_speed_mps)
        tt[i] = s.length_km * 1000.0 / speed
        m.mean_ax[i] = rng.normal(0.0, profile.accel_noise_sd, len(cols))
        m.mean_ay[i] = rng.normal(0.0, profile.accel_noise_sd, len(cols))
    return m


def period_statistics(m: TravelTimeMatrix, segments: Sequence[Segment],
                      peak_windows: Sequence[tuple[float, float]] = ((6, 9), (16, 19))) -> list[dict]:
    """Per-segment travel-time mean/SD split into peak and non-peak cells."""
    hour = local_hour_fraction(m.interval_starts, m.tz_offset_min)
    peak = np.zeros(m.n_intervals, dtype=bool)
    for a, b in peak_windows:
        peak |= (hour >= a) & (hour < b)
    length = {s.id: s.length_km for s in segments}
    rows = []
    for i, sid in enumerate(m.segment_ids):
        row = {"segment_id": sid, "length_km": length.get(sid, float("nan"))}
        for name, sel in (("peak", peak), ("non_peak", ~peak)):
            vals = m.tt_s[i, sel]
            vals = vals[np.isfinite(vals)]
            row[f"{name}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            row[f"{name}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")
        rows.append(row)
    return rows


def plant_depth2_target(ds: SupervisedDataset, noise_sd: float, seed: int = 0,
                        ) -> tuple[SupervisedDataset, np.ndarray]:
    """Replace the targets by a fixed depth-2 tree of the features plus Gaussian noise.

    The root splits the lag-1 travel time at its median; the left child splits
    on the hour index, the right child on the day index. Returns the new
    dataset and the noise-free targets.
    """
    lag1 = ds.column("TT_i-1")
    hour = ds.column("H")
    day = ds.column("D")
    cut = float(np.median(lag1))
    clean = np.where(lag1 <= cut, np.where(hour <= 5.5, 45.0, 60.0), np.where(day <= 5.5, 95.0, 75.0))
    noisy = clean + np.random.default_rng(seed).normal(0.0, noise_sd, len(clean))
    out = SupervisedDataset(ds.feature_names, ds.X.copy(), noisy, ds.segment_id, ds.target_start,
                            ds.last_lag_start, ds.tz_offset_min)
    return out, clean
