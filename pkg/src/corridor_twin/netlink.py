"""Discrete-event message transport between stations, server and vehicles.

Channels add a base latency, a non-negative jitter draw and Bernoulli loss.
Delivered envelopes go through :class:`EventQueue`, which releases them in
``(rx_time, src, seq)`` order. The fixed-width wire layout used for payload
accounting lives here as well.
"""

from __future__ import annotations

import csv
import heapq
import math
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError

CHANNEL_KINDS = ("uplink4g", "cv2x", "itsg5")
JITTER_LOG_SIGMA = 0.5
JITTER_CAP = 10.0  # truncation, in units of the jitter scale


@dataclass(frozen=True)
class ChannelModel:
    kind: str
    latency_base: float = 0.05
    jitter: float = 0.0
    loss_prob: float = 0.0
    range: Optional[float] = None

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ConfigError(f"unknown channel kind {self.kind!r}")
        if self.latency_base < 0 or self.jitter < 0:
            raise ConfigError("latency and jitter must be non-negative")
        if not 0.0 <= self.loss_prob < 1.0 and self.loss_prob != 1.0:
            raise ConfigError("loss_prob must lie in [0, 1]")
        if self.kind == "itsg5" and (self.range is None or not math.isfinite(self.range)):
            raise ConfigError("itsg5 channels need a finite range")


def default_channels() -> dict[str, ChannelModel]:
    """Default link set: 4G uplink, C-V2X downlink, ITS-G5 backhaul hop and RSU broadcast."""
    return {
        "uplink4g": ChannelModel("uplink4g", 0.05),
        "cv2x": ChannelModel("cv2x", 0.05),
        "itsg5_hop": ChannelModel("itsg5", 0.02, range=300.0),
        "itsg5_broadcast": ChannelModel("itsg5", 0.01, range=300.0),
    }


@dataclass
class Envelope:
    payload: Any
    src: str
    dst: str
    tx_time: float
    rx_time: Optional[float]
    channel: str = "uplink4g"
    seq: int = -1
    via: Optional[str] = None

    @property
    def dropped(self) -> bool:
        return self.rx_time is None


def jitter_draw(scale: float, z: float) -> float:
    """Truncated log-normal jitter with mean ``scale`` (before truncation)."""
    if scale <= 0:
        return 0.0
    mu = math.log(scale) - 0.5 * JITTER_LOG_SIGMA ** 2
    return min(math.exp(mu + JITTER_LOG_SIGMA * z), JITTER_CAP * scale)


def transmit(channel: ChannelModel, payload, src: str, t: float, rng: np.random.Generator,
             dst: str = "server", seq: int = -1) -> Envelope:
    """Send one payload; two draws per call regardless of outcome."""
    u = rng.random()
    z = rng.standard_normal()
    if u < channel.loss_prob:
        return Envelope(payload, src, dst, t, None, channel.kind, seq)
    rx = t + channel.latency_base + jitter_draw(channel.jitter, z)
    return Envelope(payload, src, dst, t, rx, channel.kind, seq)


@dataclass(frozen=True)
class Subscriber:
    """A connected vehicle position and the downlink paths it listens on."""

    id: str
    x: float
    y: float
    channels: tuple[str, ...] = ("cv2x",)


def route_downlink(twin_frame, mode: str, server: str, stations: Sequence, vehicles: Sequence[Subscriber],
                   t: float, rng: np.random.Generator, channels: Optional[dict] = None,
                   seq: int = -1) -> list[Envelope]:
    """Distribute one twin frame to subscribed vehicles.

    ``cv2x`` sends straight from the server to each subscriber. ``itsg5``
    first ships the frame to every station, whose RSU then broadcasts it to
    subscribers within range; a vehicle near several RSUs gets several copies
    (see :class:`Deduplicator`). Returned envelopes are end to end: ``tx_time``
    is the server send time and ``via`` names the relaying station.
    """
    ch = channels or default_channels()
    out: list[Envelope] = []
    if mode == "cv2x":
        for sub in sorted(vehicles, key=lambda v: v.id):
            if "cv2x" not in sub.channels:
                continue
            out.append(transmit(ch["cv2x"], twin_frame, server, t, rng, dst=sub.id, seq=seq))
        return out
    if mode != "itsg5":
        raise ConfigError(f"unknown downlink mode {mode!r}")
    bcast = ch["itsg5_broadcast"]
    for st in sorted(stations, key=lambda s: s.id):
        hop = transmit(ch["itsg5_hop"], twin_frame, server, t, rng, dst=st.id, seq=seq)
        sy = getattr(st, "mount_y", 0.0)
        for sub in sorted(vehicles, key=lambda v: v.id):
            if "itsg5" not in sub.channels:
                continue
            if math.hypot(sub.x - st.s, sub.y - sy) > bcast.range:
                continue
            if hop.dropped:
                out.append(Envelope(twin_frame, st.id, sub.id, t, None, "itsg5", seq, via=st.id))
                continue
            b = transmit(bcast, twin_frame, st.id, hop.rx_time, rng, dst=sub.id, seq=seq)
            out.append(Envelope(twin_frame, st.id, sub.id, t, b.rx_time, "itsg5", seq, via=st.id))
    return out


def in_itsg5_range(sub: Subscriber, stations: Sequence, rng_m: float) -> bool:
    return any(math.hypot(sub.x - st.s, sub.y - getattr(st, "mount_y", 0.0)) <= rng_m for st in stations)


class Deduplicator:
    """Receiver-side filter for dual-homed vehicles; keys on ``(frame_time, seq)``."""

    def __init__(self):
        self._seen: set = set()

    def accept(self, env: Envelope) -> bool:
        frame_time = getattr(env.payload, "frame_time", getattr(env.payload, "msg_time", None))
        key = (env.dst, frame_time, env.seq)
        if key in self._seen:
            return False
        self._seen.add(key)
        return True


class EventQueue:
    """Delivery queue owned by the simulation loop."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.sent: dict[str, int] = {}
        self.dropped: dict[str, int] = {}
        self.delivered: dict[str, int] = {}
        self._released: set[int] = set()

    def __len__(self):
        return len(self._heap)

    def push(self, env: Envelope) -> None:
        self.sent[env.channel] = self.sent.get(env.channel, 0) + 1
        if env.dropped:
            self.dropped[env.channel] = self.dropped.get(env.channel, 0) + 1
            return
        if env.rx_time < env.tx_time:
            raise ValueError("envelope would arrive before it was sent")
        key_seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (env.rx_time, env.src, key_seq, env))

    def poll(self, t: float) -> list[Envelope]:
        out = []
        while self._heap and self._heap[0][0] <= t + 1e-12:
            _, _, key_seq, env = heapq.heappop(self._heap)
            if key_seq in self._released:
                continue
            self._released.add(key_seq)
            self.delivered[env.channel] = self.delivered.get(env.channel, 0) + 1
            out.append(env)
        return out


def poll_deliveries(event_queue: EventQueue, t: float) -> list[Envelope]:
    """Envelopes due at or before ``t`` in ``(rx_time, src, seq)`` order."""
    return event_queue.poll(t)


# wire layout ---------------------------------------------------------------

MSG_OBJECTS, MSG_TWIN, MSG_SPAT = 1, 2, 3
HEADER = struct.Struct("<BHIH7x")
OBJECT_REC = struct.Struct("<HBBddffffff20x")
TWIN_REC = struct.Struct("<IBBddffff26x")
SPAT_REC = struct.Struct("<Bddf43x")
assert HEADER.size == 16 and OBJECT_REC.size == 64 and TWIN_REC.size == 64 and SPAT_REC.size == 64

CLASS_CODES = {"car": 0, "truck": 1, "bus": 2, "bicycle": 3, "pedestrian": 4}
SENSOR_CODES = {"lidar": 0, "camera": 1, "ir": 2}
STATE_CODES = {"RED": 0, "AMBER": 1, "GREEN": 2}
SERVER_CODE = 0xFFFF


def src_code(src: str) -> int:
    if src == "server":
        return SERVER_CODE
    m = re.search(r"(\d+)$", src)
    if m is None:
        raise ValueError(f"cannot encode source {src!r}")
    return int(m.group(1))


def _inv(d):
    return {v: k for k, v in d.items()}


def encode_object_list(msg) -> bytes:
    parts = [HEADER.pack(MSG_OBJECTS, src_code(msg.station_id), int(round(msg.frame_time * 1000)),
                         len(msg.objects))]
    for o in msg.objects:
        (cxx, cxy), (_, cyy) = o.cov
        parts.append(OBJECT_REC.pack(o.local_id, CLASS_CODES[o.cls], SENSOR_CODES[o.sensor], o.x, o.y,
                                     o.vx, o.vy, cxx, cxy, cyy, o.confidence))
    return b"".join(parts)


def decode_object_list(buf: bytes, prefix: str = "ST"):
    from .stations import DetectedObject, ObjectListMessage

    kind, src, ms, count = HEADER.unpack_from(buf, 0)
    if kind != MSG_OBJECTS:
        raise ValueError(f"not an object list (msg_type={kind})")
    sid = f"{prefix}{src:02d}"
    classes, sensors = _inv(CLASS_CODES), _inv(SENSOR_CODES)
    objs = []
    for k in range(count):
        lid, c, sn, x, y, vx, vy, cxx, cxy, cyy, conf = OBJECT_REC.unpack_from(
            buf, HEADER.size + k * OBJECT_REC.size)
        objs.append(DetectedObject(sid, lid, classes[c], x, y, vx, vy, ((cxx, cxy), (cxy, cyy)),
                                   conf, sensors[sn]))
    return ObjectListMessage(sid, ms / 1000.0, tuple(objs))


def encode_twin_frame(frame) -> bytes:
    parts = [HEADER.pack(MSG_TWIN, SERVER_CODE, int(round(frame.frame_time * 1000)), len(frame.tracks))]
    for e in frame.tracks:
        parts.append(TWIN_REC.pack(e.global_id, CLASS_CODES[e.cls], min(e.n_contrib, 255), e.x, e.y,
                                   e.vx, e.vy, e.quality, e.sigma))
    return b"".join(parts)


def decode_twin_frame(buf: bytes):
    from .fusion import TwinEntry, TwinFrame

    kind, _, ms, count = HEADER.unpack_from(buf, 0)
    if kind != MSG_TWIN:
        raise ValueError(f"not a twin frame (msg_type={kind})")
    classes = _inv(CLASS_CODES)
    entries = []
    for k in range(count):
        gid, c, n, x, y, vx, vy, q, sig = TWIN_REC.unpack_from(buf, HEADER.size + k * TWIN_REC.size)
        entries.append(TwinEntry(gid, classes[c], x, y, vx, vy, q, n, sig))
    return TwinFrame(ms / 1000.0, tuple(entries))


def encode_spat(fc) -> bytes:
    parts = [HEADER.pack(MSG_SPAT, src_code(fc.signal_id), int(round(fc.msg_time * 1000)), len(fc.phases))]
    for ph in fc.phases:
        parts.append(SPAT_REC.pack(STATE_CODES[ph.state.value], ph.start, ph.end, ph.confidence))
    return b"".join(parts)


def decode_spat(buf: bytes, prefix: str = "S"):
    from .world.signals import SignalState, SpatForecast, SpatPhase

    kind, src, ms, count = HEADER.unpack_from(buf, 0)
    if kind != MSG_SPAT:
        raise ValueError(f"not a SPaT message (msg_type={kind})")
    states = _inv(STATE_CODES)
    phases = []
    for k in range(count):
        st, a, b, c = SPAT_REC.unpack_from(buf, HEADER.size + k * SPAT_REC.size)
        phases.append(SpatPhase(SignalState(states[st]), a, b, c))
    return SpatForecast(f"{prefix}{src}", ms / 1000.0, tuple(phases))


def wire_size(payload) -> int:
    n = len(getattr(payload, "objects", getattr(payload, "tracks", getattr(payload, "phases", ()))))
    return HEADER.size + 64 * n


# latency log ---------------------------------------------------------------

LATENCY_COLUMNS = ("msg_type", "src", "dst", "tx_time", "rx_time", "channel")


def msg_type_of(payload) -> str:
    if hasattr(payload, "objects"):
        return "objects"
    if hasattr(payload, "tracks"):
        return "twin"
    if hasattr(payload, "phases"):
        return "spat"
    return "other"


class LatencyLog:
    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, env: Envelope) -> None:
        self.rows.append((msg_type_of(env.payload), env.src, env.dst, env.tx_time, env.rx_time, env.channel))

    def write(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(LATENCY_COLUMNS)
            for m, s, d, tx, rx, ch in self.rows:
                wr.writerow([m, s, d, repr(tx), "" if rx is None else repr(rx), ch])
        return path


def read_latency_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            r["tx_time"] = float(r["tx_time"])
            r["rx_time"] = float(r["rx_time"]) if r["rx_time"] else None
            rows.append(r)
    return rows
