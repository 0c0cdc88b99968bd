"""Roadside station sensing at object-list level.

Each station carries a LiDAR pair covering its immediate surroundings and a
camera aimed at the section of an adjacent station, so that road users hidden
from one station's LiDAR can be picked up by a neighbour. Infrared stations
are a separate, condition-dependent variant. Sensing produces noisy
:class:`ObjectListMessage` values; raw point clouds are never modelled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, PlacementError
from .world.corridor import CorridorMap

RAW_BYTES_PER_S = 1e8
HEADER_BYTES = 16
OBJECT_BYTES = 64
MIN_SPACING, MAX_SPACING = 60.0, 100.0
CONDITIONS = ("day", "night", "rain")


@dataclass(frozen=True)
class StationConfig:
    id: str
    s: float
    lidar_radius: float = 50.0
    camera_target: tuple[float, float] = (0.0, 0.0)
    proc_latency: float = 0.05
    sigma_lidar: float = 0.05
    sigma_cam_lat: float = 0.10
    sigma_cam_range: float = 0.50
    sigma_vel: float = 0.30
    p_miss: float = 0.05
    p_false: float = 0.01
    frame_rate: float = 10.0
    mount_y: float = -5.0
    occlusion: bool = True
    camera_miss_by_condition: tuple[tuple[str, float], ...] = (("night", 0.40), ("rain", 0.25))

    def __post_init__(self):
        if self.lidar_radius <= 0:
            raise ConfigError("lidar_radius must be positive")
        for name in ("p_miss", "p_false"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.sigma_cam_range < self.sigma_cam_lat:
            raise ConfigError("camera range noise must be at least the lateral noise")
        if min(self.sigma_lidar, self.sigma_cam_lat, self.sigma_vel) < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")

    def camera_p_miss(self, condition: str = "day") -> float:
        return dict(self.camera_miss_by_condition).get(condition, self.p_miss)


@dataclass(frozen=True)
class IrStationConfig:
    id: str
    s: float
    spacing: float = 100.0
    power_budget_w: float = 100.0
    quality_by_condition: tuple[tuple[str, float, float], ...] = (
        ("day", 0.03, 0.15), ("night", 0.02, 0.15), ("rain", 0.05, 0.20))
    sensing_range: float = 60.0
    proc_latency: float = 0.08
    p_false: float = 0.0
    frame_rate: float = 10.0

    def __post_init__(self):
        if self.power_budget_w > 100.0:
            raise ConfigError("infrared station power budget is capped at 100 W")
        for cond, p_miss, sigma in self.quality_by_condition:
            if not 0.0 <= p_miss < 1.0 or sigma < 0:
                raise ConfigError(f"bad quality entry for {cond!r}")

    def quality(self, condition: str) -> tuple[float, float]:
        for cond, p_miss, sigma in self.quality_by_condition:
            if cond == condition:
                return p_miss, sigma
        raise ConfigError(f"no quality entry for condition {condition!r}")


@dataclass(frozen=True)
class DetectedObject:
    """One detection in a station's object list.

    There is deliberately no identity field beyond the per-frame ``local_id``.
    """

    station_id: str
    local_id: int
    cls: str
    x: float
    y: float
    vx: float
    vy: float
    cov: tuple[tuple[float, float], tuple[float, float]]
    confidence: float
    sensor: str = "lidar"


@dataclass(frozen=True)
class ObjectListMessage:
    station_id: str
    frame_time: float
    objects: tuple[DetectedObject, ...]

    @property
    def payload_bytes(self) -> int:
        return HEADER_BYTES + OBJECT_BYTES * len(self.objects)


@dataclass
class TruthSnapshot:
    """Column view of the ground truth at one instant (object centres)."""

    t: float
    ids: np.ndarray
    cls: list
    x: np.ndarray
    y: np.ndarray
    length: np.ndarray
    width: np.ndarray
    vx: np.ndarray
    vy: np.ndarray

    @classmethod
    def from_world(cls, world, extra: Sequence = ()) -> "TruthSnapshot":
        vehs = list(world.vehicles)
        rows = [(v.id, v.cls, v.s - 0.5 * v.length, world.y_of(v), v.length, v.width, v.v, 0.0)
                for v in vehs]
        rows.extend(extra)
        return cls.from_rows(world.t, rows)

    @classmethod
    def from_rows(cls, t: float, rows: Sequence) -> "TruthSnapshot":
        if rows:
            ids, classes, x, y, ln, wd, vx, vy = zip(*rows)
        else:
            ids, classes, x, y, ln, wd, vx, vy = ((),) * 8
        f = lambda a: np.asarray(a, dtype=float)
        return cls(t, np.asarray(ids, dtype=np.int64), list(classes), f(x), f(y), f(ln), f(wd),
                   f(vx), f(vy))

    def __len__(self):
        return len(self.ids)


def _cell_bounds(positions: Sequence[float], length: float) -> list[tuple[float, float]]:
    bounds = []
    for i, s in enumerate(positions):
        lo = 0.0 if i == 0 else 0.5 * (positions[i - 1] + s)
        hi = length if i == len(positions) - 1 else 0.5 * (s + positions[i + 1])
        bounds.append((max(0.0, lo), min(length, hi)))
    return bounds


def place_stations(corridor: CorridorMap, spacing: float, camera_direction: str = "downstream",
                   **station_kw) -> list[StationConfig]:
    """Place stations every ``spacing`` metres starting at s = 0.

    Each camera targets the section (cell) belonging to the adjacent station
    in ``camera_direction``; the end station without such a neighbour looks
    the other way.
    """
    if not MIN_SPACING <= spacing <= MAX_SPACING:
        raise PlacementError(f"spacing {spacing} m outside [{MIN_SPACING}, {MAX_SPACING}]")
    radius = station_kw.get("lidar_radius", 50.0)
    positions = [0.0]
    while positions[-1] + radius < corridor.length:
        positions.append(positions[-1] + spacing)
    cells = _cell_bounds(positions, corridor.length)
    step = 1 if camera_direction == "downstream" else -1
    stations = []
    for i, s in enumerate(positions):
        j = i + step
        if not 0 <= j < len(positions):
            j = i - step
        target = cells[j] if 0 <= j < len(positions) else cells[i]
        stations.append(StationConfig(f"ST{i:02d}", s, camera_target=target, **station_kw))
    return stations


@dataclass(frozen=True)
class CoverageReport:
    covered: bool
    gaps: tuple[tuple[float, float], ...]
    redundancy: int
    profile: tuple[tuple[float, float, int], ...]

    def redundancy_at(self, s: float) -> int:
        best = 0
        for lo, hi, n in self.profile:
            if lo <= s <= hi:
                best = max(best, n)
        return best


def coverage_check(stations: Iterable, corridor: CorridorMap) -> CoverageReport:
    """Sweep the LiDAR intervals along the corridor axis.

    ``profile`` lists maximal runs with a constant station count; intervals are
    closed, so touching disks leave no gap.
    """
    L = corridor.length
    ivs = []
    for st in stations:
        r = getattr(st, "lidar_radius", None) or getattr(st, "sensing_range")
        ivs.append((max(0.0, st.s - r), min(L, st.s + r)))
    cuts = sorted({0.0, L, *(a for a, _ in ivs), *(b for _, b in ivs)})
    cuts = [c for c in cuts if 0.0 <= c <= L]
    profile = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        n = sum(1 for a, b in ivs if a <= mid <= b)
        if profile and profile[-1][2] == n:
            profile[-1] = (profile[-1][0], hi, n)
        else:
            profile.append((lo, hi, n))
    gaps = tuple((lo, hi) for lo, hi, n in profile if n == 0)
    covered = not gaps
    redundancy = min((n for _, _, n in profile), default=0)
    return CoverageReport(covered, gaps, redundancy, tuple(profile))


def _bearing_intervals(snap: TruthSnapshot, sx: float, sy: float):
    hl, hw = 0.5 * snap.length, 0.5 * snap.width
    cx = np.stack([snap.x - hl, snap.x + hl, snap.x - hl, snap.x + hl], axis=1) - sx
    cy = np.stack([snap.y - hw, snap.y - hw, snap.y + hw, snap.y + hw], axis=1) - sy
    ang = np.arctan2(cy, cx)
    return ang.min(axis=1), ang.max(axis=1)


def occluded_mask(snap: TruthSnapshot, idx: np.ndarray, sx: float, sy: float,
                  min_overlap: float = 0.5) -> np.ndarray:
    """Objects among ``idx`` whose bearing interval is at least ``min_overlap`` covered by a nearer one."""
    if len(idx) < 2:
        return np.zeros(len(idx), dtype=bool)
    sub = TruthSnapshot(snap.t, snap.ids[idx], [snap.cls[i] for i in idx], snap.x[idx], snap.y[idx],
                        snap.length[idx], snap.width[idx], snap.vx[idx], snap.vy[idx])
    lo, hi = _bearing_intervals(sub, sx, sy)
    rng_ = np.hypot(sub.x - sx, sub.y - sy)
    width = np.maximum(hi - lo, 1e-12)
    ov = np.minimum(hi[:, None], hi[None, :]) - np.maximum(lo[:, None], lo[None, :])
    ov = np.clip(ov, 0.0, None) / width[:, None]  # row: target, col: occluder
    nearer = rng_[None, :] < rng_[:, None]
    return np.any((ov >= min_overlap) & nearer, axis=1)


def _on_frame_grid(t: float, frame_rate: float) -> bool:
    k = t * frame_rate
    return abs(k - round(k)) < 1e-6


def _camera_cov(dx: float, dy: float, s_rng: float, s_lat: float):
    th = math.atan2(dy, dx)
    c, s = math.cos(th), math.sin(th)
    vr, vl = s_rng * s_rng, s_lat * s_lat
    cxx = c * c * vr + s * s * vl
    cyy = s * s * vr + c * c * vl
    cxy = c * s * (vr - vl)
    return ((cxx, cxy), (cxy, cyy))


def _draw(rng: np.random.Generator, cov) -> tuple[float, float]:
    (a, b), (_, d) = cov
    if a == 0.0 and b == 0.0 and d == 0.0:
        rng.standard_normal(2)
        return 0.0, 0.0
    l11 = math.sqrt(a)
    l21 = b / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(d - l21 * l21, 0.0))
    z = rng.standard_normal(2)
    return l11 * z[0], l21 * z[0] + l22 * z[1]


def _finish(station_id: str, t: float, dets: list, rng: np.random.Generator) -> ObjectListMessage:
    order = rng.permutation(len(dets)) if dets else []
    objs = []
    for local_id, k in enumerate(order):
        d = dets[int(k)]
        objs.append(DetectedObject(station_id, local_id, *d))
    return ObjectListMessage(station_id, t, tuple(objs))


def sense_tick(station: StationConfig, world, rng: np.random.Generator,
               condition: str = "day") -> ObjectListMessage:
    """Object list produced by ``station`` for the current world frame.

    Every object visible to the LiDAR (within range, not shadowed) yields a
    LiDAR detection; objects the LiDAR cannot provide but which lie in this
    station's camera target yield a camera detection instead, with range
    noise along the line of sight. Detections are missed with ``p_miss`` and
    one clutter detection is appended with probability ``p_false``.
    """
    snap = world if isinstance(world, TruthSnapshot) else TruthSnapshot.from_world(world)
    if not _on_frame_grid(snap.t, station.frame_rate):
        raise ValueError(f"t={snap.t} is not on the {station.frame_rate} Hz frame grid")
    sx, sy = station.s, station.mount_y
    in_lidar = np.abs(snap.x - sx) <= station.lidar_radius
    idx = np.flatnonzero(in_lidar)
    visible = np.zeros(len(snap), dtype=bool)
    if len(idx):
        occ = occluded_mask(snap, idx, sx, sy) if station.occlusion else np.zeros(len(idx), bool)
        visible[idx[~occ]] = True
    lo, hi = station.camera_target
    in_cam = (snap.x >= lo) & (snap.x <= hi) & ~visible
    cam_miss = station.camera_p_miss(condition)
    s_l = station.sigma_lidar
    lidar_cov = ((s_l * s_l, 0.0), (0.0, s_l * s_l))
    dets = []
    for i in np.flatnonzero(visible | in_cam):
        if visible[i]:
            sensor, cov, p_miss, conf = "lidar", lidar_cov, station.p_miss, 0.9
        elif in_cam[i]:
            cov = _camera_cov(snap.x[i] - sx, snap.y[i] - sy, station.sigma_cam_range,
                              station.sigma_cam_lat)
            sensor, p_miss, conf = "camera", cam_miss, 0.7
        else:
            continue
        u = rng.random()
        ex, ey = _draw(rng, cov)
        evx, evy = station.sigma_vel * rng.standard_normal(2)
        if u < p_miss:
            continue
        dets.append((snap.cls[i], float(snap.x[i] + ex), float(snap.y[i] + ey),
                     float(snap.vx[i] + evx), float(snap.vy[i] + evy), cov, conf, sensor))
    u = rng.random()
    fx = sx + station.lidar_radius * (2.0 * rng.random() - 1.0)
    fy = 3.5 * rng.random() * 2.0
    if u < station.p_false:
        dets.append(("car", float(fx), float(fy), 0.0, 0.0, lidar_cov, 0.3, "lidar"))
    return _finish(station.id, snap.t, dets, rng)


def ir_sense_tick(station: IrStationConfig, world, condition: str, rng: np.random.Generator) -> ObjectListMessage:
    """Thermal-camera object list; quality depends on ``condition``.

    Same message schema as :func:`sense_tick`, isotropic noise from the
    station's condition table.
    """
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}")
    snap = world if isinstance(world, TruthSnapshot) else TruthSnapshot.from_world(world)
    if not _on_frame_grid(snap.t, station.frame_rate):
        raise ValueError(f"t={snap.t} is not on the {station.frame_rate} Hz frame grid")
    p_miss, sigma = station.quality(condition)
    cov = ((sigma * sigma, 0.0), (0.0, sigma * sigma))
    dets = []
    for i in np.flatnonzero(np.abs(snap.x - station.s) <= station.sensing_range):
        u = rng.random()
        ex, ey = _draw(rng, cov)
        if u < p_miss:
            continue
        dets.append((snap.cls[i], float(snap.x[i] + ex), float(snap.y[i] + ey),
                     float(snap.vx[i]), float(snap.vy[i]), cov, 0.8, "ir"))
    if station.p_false > 0 and rng.random() < station.p_false:
        dets.append(("car", float(station.s + station.sensing_range * (2 * rng.random() - 1)),
                     float(7.0 * rng.random()), 0.0, 0.0, cov, 0.3, "ir"))
    return _finish(station.id, snap.t, dets, rng)


def ir_helps_at_night(ir: IrStationConfig, optical: StationConfig) -> bool:
    """True when the infrared unit misses no more than the optical camera at night."""
    return ir.quality("night")[0] <= optical.camera_p_miss("night")


@dataclass(frozen=True)
class DataRate:
    station_id: str
    raw_bytes_per_s: float
    objectlist_bytes_per_s: float
    reduction_factor: float


def data_rate_report(stations: Sequence, duration: float,
                     messages: Optional[Iterable[ObjectListMessage]] = None,
                     objects_per_frame: Optional[float] = None) -> list[DataRate]:
    """Object-list upstream rate per station against the raw sensor volume.

    Either pass the ``messages`` actually produced over ``duration`` seconds,
    or a nominal ``objects_per_frame`` load at each station's frame rate.
    """
    if duration <= 0:
        raise ConfigError("duration must be positive")
    totals = {st.id: 0 for st in stations}
    if messages is not None:
        for msg in messages:
            if msg.station_id in totals:
                totals[msg.station_id] += msg.payload_bytes
    out = []
    for st in stations:
        if messages is None:
            n = objects_per_frame or 0.0
            rate = (HEADER_BYTES + OBJECT_BYTES * n) * st.frame_rate
        else:
            rate = totals[st.id] / duration
        factor = RAW_BYTES_PER_S / rate if rate > 0 else math.inf
        out.append(DataRate(st.id, RAW_BYTES_PER_S, rate, factor))
    return out


LAYOUT_COLUMNS = ("station_id", "s", "lidar_radius", "camera_target_start", "camera_target_end")


def export_layout(stations: Sequence[StationConfig], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LAYOUT_COLUMNS)
        for st in stations:
            wr.writerow([st.id, repr(st.s), repr(st.lidar_radius), repr(st.camera_target[0]),
                         repr(st.camera_target[1])])
    return path


def import_layout(path, **station_kw) -> list[StationConfig]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [StationConfig(r["station_id"], float(r["s"]), float(r["lidar_radius"]),
                          (float(r["camera_target_start"]), float(r["camera_target_end"])),
                          **station_kw) for r in rows]
