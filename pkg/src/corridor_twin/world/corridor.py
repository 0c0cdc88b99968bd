"""Corridor geometry and scenario-config parsing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

from ..errors import ConfigError
from .signals import ActuatedPlan, FixedPlan, SignalHead, SignalState

SEGMENT_KINDS = ("urban", "rural", "highway")


@dataclass(frozen=True)
class Segment:
    start_s: float
    end_s: float
    kind: str
    speed_limit: float


@dataclass(frozen=True)
class BusStop:
    s: float
    lateral_offset: float


@dataclass(frozen=True)
class Landmark:
    id: str
    x: float
    y: float


@dataclass(frozen=True)
class CorridorMap:
    """Single-direction corridor; lane 0 is the rightmost lane.

    World coordinates: ``x`` runs along the corridor, ``y`` is lateral with the
    right road edge (curb) at ``y = 0``.
    """

    length: float
    lanes_per_direction: int
    segments: tuple[Segment, ...]
    signals: tuple[SignalHead, ...] = ()
    bus_stops: tuple[BusStop, ...] = ()
    landmarks: tuple[Landmark, ...] = ()
    lane_width: float = 3.5

    def speed_limit_at(self, s: float) -> float:
        for seg in self.segments:
            if s < seg.end_s:
                return seg.speed_limit
        return self.segments[-1].speed_limit

    def segment_at(self, s: float) -> Segment:
        for seg in self.segments:
            if s < seg.end_s:
                return seg
        return self.segments[-1]

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    @property
    def max_speed_limit(self) -> float:
        return max(seg.speed_limit for seg in self.segments)


def _parse_plan(raw: Mapping[str, Any]):
    kind = raw.get("type", "fixed")
    if kind == "fixed":
        cycle = tuple((SignalState(str(st).upper()), float(d)) for st, d in raw["cycle"])
        pmw = raw.get("priority_max_wait")
        return FixedPlan(cycle, float(raw.get("offset", 0.0)),
                         None if pmw is None else float(pmw))
    if kind == "actuated":
        kw = {k: raw[k] for k in ("min_green", "max_green", "gap_out", "amber", "red",
                                  "min_red", "detector_length") if k in raw}
        return ActuatedPlan(priority_request_hook=bool(raw.get("priority_request_hook", False)),
                            **{k: float(v) for k, v in kw.items()})
    raise ConfigError(f"unknown signal plan type {kind!r}")


def build_corridor(config: Mapping[str, Any]) -> CorridorMap:
    """Validate the ``corridor`` section of a scenario config.

    Accepts either the full scenario mapping or just its corridor section.
    """
    cfg = config.get("corridor", config)
    try:
        length = float(cfg["length"])
        lanes = int(cfg.get("lanes_per_direction", 1))
        raw_segments = list(cfg.get("segments") or [])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed corridor config: {exc}") from exc
    if length <= 0:
        raise ConfigError("corridor length must be positive")
    if lanes < 1:
        raise ConfigError("need at least one lane")
    if not raw_segments:
        raise ConfigError("corridor needs at least one segment")

    segments = []
    for raw in raw_segments:
        seg = Segment(float(raw["start"]), float(raw["end"]), str(raw.get("kind", "urban")),
                      float(raw["speed_limit"]))
        if seg.kind not in SEGMENT_KINDS:
            raise ConfigError(f"unknown segment kind {seg.kind!r}")
        if seg.speed_limit <= 0:
            raise ConfigError("speed_limit must be positive")
        if seg.end_s <= seg.start_s:
            raise ConfigError("segment end must exceed start")
        segments.append(seg)
    segments.sort(key=lambda sg: sg.start_s)
    cursor = 0.0
    for seg in segments:
        if seg.start_s < cursor - 1e-9:
            raise ConfigError(f"segments overlap at s={seg.start_s}")
        if seg.start_s > cursor + 1e-9:
            raise ConfigError(f"gap in segments between {cursor} and {seg.start_s}")
        cursor = seg.end_s
    if abs(cursor - length) > 1e-9:
        raise ConfigError(f"segments end at {cursor}, corridor length is {length}")

    signals = []
    for raw in cfg.get("signals") or []:
        head = SignalHead(str(raw["id"]), float(raw["s"]), _parse_plan(raw.get("plan", {})))
        if not 0 <= head.s <= length:
            raise ConfigError(f"signal {head.id} outside corridor")
        signals.append(head)
    signals.sort(key=lambda h: h.s)
    stops = tuple(BusStop(float(b["s"]), float(b.get("lateral_offset", 0.0)))
                  for b in cfg.get("bus_stops") or [])
    landmarks = tuple(Landmark(str(m["id"]), float(m["x"]), float(m["y"]))
                      for m in cfg.get("landmarks") or [])
    return CorridorMap(length, lanes, tuple(segments), tuple(signals), stops, landmarks,
                       float(cfg.get("lane_width", 3.5)))
