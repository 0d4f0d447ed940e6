"""Directed freeway segments and assignment of position stamps to them.

Segments are read from a small CSV file::

    id,direction,length_km,polyline
    S1,SB,,42.30 -83.70;42.29 -83.70

``polyline`` is a ``;``-separated list of ``lat lon`` pairs in decimal degrees.
``length_km`` may be blank; it is always recomputed from the geometry.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0
MAX_ADVISED_LENGTH_KM = 2.0
DEFAULT_MAX_DIST_M = 30.0
DEFAULT_MAX_HEADING_DELTA_DEG = 45.0

LatLon = tuple[float, float]


def haversine_m(a: LatLon, b: LatLon) -> float:
    """Great-circle distance in meters between two (lat, lon) points."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    s = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(s))


def polyline_length_km(vertices: Sequence[LatLon]) -> float:
    return sum(haversine_m(a, b) for a, b in zip(vertices[:-1], vertices[1:])) / 1000.0


def heading_delta(a_deg, b_deg):
    """Smallest angle between two compass directions, in [0, 180]."""
    d = np.abs(np.mod(np.asarray(a_deg, dtype=float) - b_deg, 360.0))
    out = np.minimum(d, 360.0 - d)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Segment:
    """A directed freeway link; vertices are ordered in the direction of travel."""

    id: str
    vertices: tuple[LatLon, ...]
    direction_label: str = ""
    length_km: float = field(default=float("nan"))

    def __post_init__(self):
        verts = tuple((float(lat), float(lon)) for lat, lon in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 2:
            raise ValidationError(f"segment {self.id!r} has fewer than 2 vertices")
        for a, b in zip(verts[:-1], verts[1:]):
            if a == b:
                raise ValidationError(f"segment {self.id!r} repeats vertex {a} back-to-back")
        for lat, lon in verts:
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise ValidationError(f"segment {self.id!r} has out-of-range vertex ({lat}, {lon})")
        object.__setattr__(self, "length_km", polyline_length_km(verts))

    @property
    def lats(self) -> np.ndarray:
        return np.array([v[0] for v in self.vertices])

    @property
    def lons(self) -> np.ndarray:
        return np.array([v[1] for v in self.vertices])


def _parse_polyline(text: str, lineno: int) -> list[LatLon]:
    verts = []
    for pair in text.strip().split(";"):
        pair = pair.strip()
        if not pair:
            continue
        parts = pair.split()
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: bad vertex {pair!r} (expected 'lat lon')")
        try:
            verts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric vertex {pair!r}") from None
    return verts


def load_segments(path: str | Path) -> list[Segment]:
    """Read and validate a segment CSV file.

    Segment lengths are recomputed from the geometry. A supplied ``length_km``
    that disagrees by more than 0.5% is logged and replaced. Segments longer
    than 2 km are logged as warnings but kept.
    """
    path = Path(path)
    segments: list[Segment] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "polyline"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise FormatError(f"line 1: segment file header must contain {sorted(required)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            seg_id = (row.get("id") or "").strip()
            if not seg_id:
                raise FormatError(f"line {lineno}: empty segment id")
            verts = _parse_polyline(row.get("polyline") or "", lineno)
            seg = Segment(seg_id, tuple(verts), (row.get("direction") or "").strip())
            given = (row.get("length_km") or "").strip()
            if given:
                try:
                    given_km = float(given)
                except ValueError:
                    raise FormatError(f"line {lineno}: non-numeric length_km {given!r}") from None
                if abs(given_km - seg.length_km) > 0.005 * seg.length_km:
                    logger.warning("segment %s: length_km %.4f differs from geometry %.4f; using geometry",
                                   seg_id, given_km, seg.length_km)
            segments.append(seg)
    validate_segments(segments)
    return segments


def validate_segments(segments: Iterable[Segment]) -> None:
    seen: set[str] = set()
    dupes: list[str] = []
    for s in segments:
        if s.id in seen:
            dupes.append(s.id)
        seen.add(s.id)
        if s.length_km > MAX_ADVISED_LENGTH_KM:
            logger.warning("segment %s is %.3f km long (advised maximum %.1f km)",
                           s.id, s.length_km, MAX_ADVISED_LENGTH_KM)
    if dupes:
        raise ValidationError(f"duplicate segment ids: {', '.join(sorted(set(dupes)))}")


def write_segments(path: str | Path, segments: Iterable[Segment]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "direction", "length_km", "polyline"])
        for s in segments:
            poly = ";".join(f"{lat:.7f} {lon:.7f}" for lat, lon in s.vertices)
            w.writerow([s.id, s.direction_label, f"{s.length_km:.6f}", poly])


def polyline_distances(lat, lon, seg: Segment) -> tuple[np.ndarray, np.ndarray]:
    """Distance (m) from each point to ``seg`` and the bearing of the nearest edge.

    Each point uses an equirectangular projection centred on itself. Among
    equidistant edges the earliest one along the polyline wins.
    """
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    ky = math.radians(1.0) * EARTH_RADIUS_M
    kx = (np.cos(np.radians(lat)) * ky)[:, None]
    vlat, vlon = seg.lats, seg.lons
    ax = (vlon[None, :-1] - lon[:, None]) * kx
    ay = (vlat[None, :-1] - lat[:, None]) * ky
    ex = (vlon[None, 1:] - vlon[None, :-1]) * kx
    ey = np.broadcast_to((vlat[1:] - vlat[:-1])[None, :] * ky, ex.shape)
    ee = ex * ex + ey * ey
    t = np.clip(-(ax * ex + ay * ey) / ee, 0.0, 1.0)
    cx = ax + t * ex
    cy = ay + t * ey
    dist = np.hypot(cx, cy)
    nearest = np.argmin(dist, axis=1)
    rows = np.arange(len(lat))
    bearing = np.mod(np.degrees(np.arctan2(ex[rows, nearest], ey[rows, nearest])), 360.0)
    return dist[rows, nearest], bearing


def point_to_polyline_distance(p: LatLon, seg: Segment) -> tuple[float, float]:
    d, b = polyline_distances([p[0]], [p[1]], seg)
    return float(d[0]), float(b[0])


@dataclass(frozen=True)
class MatchResult:
    segment_id: str | None
    distance_m: float
    heading_delta_deg: float


def match_arrays(lat, lon, heading, segments: Sequence[Segment],
                 max_dist_m: float = DEFAULT_MAX_DIST_M,
                 max_heading_delta_deg: float = DEFAULT_MAX_HEADING_DELTA_DEG):
    """Vectorised map matching.

    Returns ``(ids, dist, dheading)`` where ``ids`` indexes into the id-sorted
    segment list (``-1`` for unmatched); see :func:`match_point` for the rule.
    When nothing matches, ``dist``/``dheading`` describe the nearest segment.
    """
    if not segments:
        raise ValidationError("no segments to match against")
    if max_dist_m <= 0 or max_heading_delta_deg <= 0:
        raise ValidationError("matching thresholds must be positive")
    lat = np.asarray(lat, dtype=float)
    n = len(lat)
    order = sorted(range(len(segments)), key=lambda i: segments[i].id)
    best = np.full(n, -1, dtype=np.int64)
    best_d = np.full(n, np.inf)
    best_h = np.full(n, np.nan)
    near_d = np.full(n, np.inf)
    near_h = np.full(n, np.nan)
    for rank, i in enumerate(order):
        d, b = polyline_distances(lat, lon, segments[i])
        dh = heading_delta(heading, b)
        ok = (d <= max_dist_m) & (dh <= max_heading_delta_deg) & (d < best_d)
        best[ok] = rank
        best_d[ok] = d[ok]
        best_h[ok] = dh[ok]
        closer = d < near_d
        near_d[closer] = d[closer]
        near_h[closer] = dh[closer]
    miss = best < 0
    best_d[miss] = near_d[miss]
    best_h[miss] = near_h[miss]
    return best, best_d, best_h


def match_point(p, segments: Sequence[Segment],
                max_dist_m: float = DEFAULT_MAX_DIST_M,
                max_heading_delta_deg: float = DEFAULT_MAX_HEADING_DELTA_DEG) -> MatchResult:
    """Assign one stamp to the nearest segment passing both the distance and heading gates.

    Ties on distance go to the lexicographically smallest id, so the result
    does not depend on the order of ``segments``.
    """
    idx, d, h = match_arrays([p.lat], [p.lon], [p.heading_deg], segments, max_dist_m, max_heading_delta_deg)
    ids = sorted(s.id for s in segments)
    seg_id = ids[idx[0]] if idx[0] >= 0 else None
    return MatchResult(seg_id, float(d[0]), float(h[0]))
