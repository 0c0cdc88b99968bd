"""Central fusion server: bucketing, association, filtering, track lifecycle.

Object lists from all stations are grouped by frame time, associated to
global tracks with gated optimal assignment and fused by a constant-velocity
Kalman filter. Confirmed tracks form the digital-twin frames.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .stations import DetectedObject, ObjectListMessage

BIG = 1e9
H = np.hstack([np.eye(2), np.zeros((2, 2))])


@dataclass
class FusionConfig:
    gate: float = 3.0
    gate_floor: float = 0.01  # m^2 added to the gating covariance only
    confirm_hits: int = 3
    max_misses: int = 10
    staleness: float = 0.5
    accel_psd: float = 0.5
    init_vel_var: float = 1.0
    extent: Optional[tuple[float, float]] = None
    greedy: bool = False


@dataclass
class Track:
    global_id: int
    x: np.ndarray
    P: np.ndarray
    last_update: float
    classes: Counter = field(default_factory=Counter)
    contributors: frozenset = frozenset()
    age: int = 1
    misses: int = 0
    hits: int = 1
    confirmed: bool = False

    @property
    def cls(self) -> str:
        if not self.classes:
            return "car"
        top = max(self.classes.values())
        return min(c for c, n in self.classes.items() if n == top)


def transition(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    d3, d2 = dt ** 3 / 3.0, dt ** 2 / 2.0
    Q = q * np.array([[d3, 0, d2, 0], [0, d3, 0, d2], [d2, 0, dt, 0], [0, d2, 0, dt]])
    return F, Q


def predict(track: Track, t: float, q: float) -> Track:
    dt = t - track.last_update
    if dt <= 0:
        return track
    F, Q = transition(dt, q)
    track.x = F @ track.x
    track.P = F @ track.P @ F.T + Q
    track.last_update = t
    return track


def _cov(det: DetectedObject) -> np.ndarray:
    return np.asarray(det.cov, dtype=float)


def measurement_update(x: np.ndarray, P: np.ndarray, z: np.ndarray, R: np.ndarray):
    """One position update. A zero ``R`` pins the position exactly to ``z``."""
    S = P[:2, :2] + R
    exact = not R.any()
    if abs(np.linalg.det(S)) < 1e-300:
        if exact:
            x = x.copy()
            x[:2] = z
        return x, P
    K = P[:, :2] @ np.linalg.inv(S)
    x = x + K @ (z - x[:2])
    P = P - K @ P[:2, :]
    P = 0.5 * (P + P.T)
    if exact:
        x[:2] = z
        P[:2, :] = 0.0
        P[:, :2] = 0.0
    return x, P


def filter_update(track: Track, detections: Sequence[DetectedObject], dt: float,
                  accel_psd: float = 0.5) -> Track:
    """Constant-velocity predict over ``dt`` then one update per detection."""
    F, Q = transition(dt, accel_psd) if dt > 0 else (np.eye(4), np.zeros((4, 4)))
    x = F @ track.x
    P = F @ track.P @ F.T + Q
    for det in detections:
        x, P = measurement_update(x, P, np.array([det.x, det.y]), _cov(det))
    track.x, track.P = x, P
    track.last_update = track.last_update + dt
    if detections:
        track.contributors = frozenset(d.station_id for d in detections)
        for d in detections:
            track.classes[d.cls] += 1
    return track


def mahalanobis_sq(track: Track, det: DetectedObject, floor: float = 0.0) -> float:
    S = track.P[:2, :2] + _cov(det) + floor * np.eye(2)
    nu = np.array([det.x, det.y]) - track.x[:2]
    if abs(np.linalg.det(S)) < 1e-300:
        return 0.0 if not nu.any() else math.inf
    return float(nu @ np.linalg.solve(S, nu))


def _batch_d2(X: np.ndarray, P: np.ndarray, Z: np.ndarray, R: np.ndarray,
              floor: float = 0.0) -> np.ndarray:
    """Squared Mahalanobis distances, tracks x detections."""
    nu = Z[None, :, :] - X[:, None, :2]
    S = P[:, None, :2, :2] + R[None, :, :, :] + floor * np.eye(2)
    a, b, c, d = S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1]
    det = a * d - b * c
    n0, n1 = nu[..., 0], nu[..., 1]
    num = d * n0 * n0 - (b + c) * n0 * n1 + a * n1 * n1
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = num / det
    zero_nu = (n0 == 0) & (n1 == 0)
    d2 = np.where(np.abs(det) < 1e-300, np.where(zero_nu, 0.0, np.inf), d2)
    return d2


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    unmatched_detections: tuple[int, ...]
    unmatched_tracks: tuple[int, ...]
    cost: float


def solve_gated(cost: np.ndarray, gate_sq: float, greedy: bool = False) -> tuple[list, float]:
    """Optimal assignment over pairs with ``cost <= gate_sq``.

    Forbidden pairs carry a prohibitive cost, so the solution first maximises
    the number of gated pairs and then minimises their total cost.
    """
    n, m = cost.shape
    if n == 0 or m == 0:
        return [], 0.0
    ok = cost <= gate_sq
    if not ok.any():
        return [], 0.0
    rows = np.flatnonzero(ok.any(axis=1))
    cols = np.flatnonzero(ok.any(axis=0))
    sub = np.where(ok[np.ix_(rows, cols)], cost[np.ix_(rows, cols)], BIG)
    if greedy:
        pairs = []
        used_r, used_c = set(), set()
        for flat in np.argsort(sub, axis=None, kind="stable"):
            i, j = divmod(int(flat), sub.shape[1])
            if sub[i, j] >= BIG or i in used_r or j in used_c:
                continue
            used_r.add(i)
            used_c.add(j)
            pairs.append((int(rows[i]), int(cols[j])))
    else:
        ri, ci = linear_sum_assignment(sub)
        pairs = [(int(rows[i]), int(cols[j])) for i, j in zip(ri, ci) if sub[i, j] < BIG]
    pairs.sort()
    return pairs, float(sum(cost[i, j] for i, j in pairs))


def associate(tracks: Sequence[Track], bucket: Sequence[DetectedObject], gate: float = 3.0,
              greedy: bool = False, floor: float = 0.0) -> Assignment:
    """Gated minimum-cost assignment of detections to tracks.

    Cost is the squared Mahalanobis distance; a pair is admissible when the
    distance is at most ``gate``. ``floor`` inflates the innovation covariance
    isotropically for gating, so near-exact tracks still follow manoeuvres.
    ``greedy`` is a fast mode without the optimality guarantee.
    """
    if tracks and bucket:
        X = np.stack([t.x for t in tracks])
        P = np.stack([t.P for t in tracks])
        Z = np.array([[d.x, d.y] for d in bucket])
        R = np.stack([_cov(d) for d in bucket])
        cost = _batch_d2(X, P, Z, R, floor)
    else:
        cost = np.zeros((len(tracks), len(bucket)))
    pairs, total = solve_gated(cost, gate * gate, greedy)
    mt = {i for i, _ in pairs}
    md = {j for _, j in pairs}
    return Assignment(tuple(pairs), tuple(j for j in range(len(bucket)) if j not in md),
                      tuple(i for i in range(len(tracks)) if i not in mt), total)


@dataclass(frozen=True)
class TwinEntry:
    global_id: int
    cls: str
    x: float
    y: float
    vx: float
    vy: float
    quality: float
    n_contrib: int = 0
    sigma: float = 0.0


@dataclass(frozen=True)
class TwinFrame:
    frame_time: float
    tracks: tuple[TwinEntry, ...]


def track_quality(pos_cov_trace: float, scale: float = 0.01) -> float:
    """Quality in (0, 1], strictly decreasing in the position-covariance trace."""
    return 1.0 / (1.0 + max(pos_cov_trace, 0.0) / scale)


def emit_twin_frame(tracks: Iterable[Track], t: float) -> TwinFrame:
    entries = []
    for tr in sorted(tracks, key=lambda tr: tr.global_id):
        if not tr.confirmed:
            continue
        tr_pos = float(tr.P[0, 0] + tr.P[1, 1])
        entries.append(TwinEntry(tr.global_id, tr.cls, float(tr.x[0]), float(tr.x[1]), float(tr.x[2]),
                                 float(tr.x[3]), track_quality(tr_pos), len(tr.contributors),
                                 math.sqrt(max(tr_pos, 0.0) / 2.0)))
    return TwinFrame(t, tuple(entries))


def lifecycle(tracks: list[Track], updated: set[int], config: FusionConfig) -> list[Track]:
    """Apply hit/miss counters after a frame.

    ``updated`` holds the global ids that received a detection. Tentative
    tracks need ``confirm_hits`` consecutive hits and die on their first miss;
    confirmed tracks die after ``max_misses`` consecutive misses.
    """
    out = []
    for tr in tracks:
        tr.age += 1
        if tr.global_id in updated:
            tr.misses = 0
            if not tr.confirmed:
                tr.hits += 1
        else:
            tr.misses += 1
            tr.contributors = frozenset()
            if not tr.confirmed:
                continue
        if not tr.confirmed and tr.hits >= config.confirm_hits:
            tr.confirmed = True
        if tr.confirmed and tr.misses >= config.max_misses:
            continue
        if config.extent is not None:
            lo, hi = config.extent
            if not lo - 10.0 <= tr.x[0] <= hi + 10.0:
                continue
        out.append(tr)
    return out


@dataclass
class FrameBuffer:
    """Object lists bucketed by frame time."""

    staleness: float = 0.5
    buckets: dict = field(default_factory=dict)
    discarded_late: int = 0
    duplicates: int = 0
    closed_before: float = -math.inf

    def key(self, t: float) -> int:
        return int(round(t * 1000))


def ingest(buffer: FrameBuffer, envelope) -> FrameBuffer:
    """Add a delivered object-list envelope to its frame bucket.

    Messages older than the staleness window on arrival, or whose frame has
    already been processed, are discarded and counted. A repeated
    ``(station, frame)`` pair is ignored.
    """
    msg: ObjectListMessage = envelope.payload
    if envelope.rx_time - msg.frame_time > buffer.staleness + 1e-9 or msg.frame_time <= buffer.closed_before:
        buffer.discarded_late += 1
        return buffer
    bucket = buffer.buckets.setdefault(buffer.key(msg.frame_time), {})
    if msg.station_id in bucket:
        buffer.duplicates += 1
        return buffer
    bucket[msg.station_id] = msg
    return buffer


class FusionServer:
    """Single logical consumer of delivered object lists."""

    def __init__(self, config: Optional[FusionConfig] = None, expected_stations: Sequence[str] = ()):
        self.config = config or FusionConfig()
        self.buffer = FrameBuffer(self.config.staleness)
        self.expected = frozenset(expected_stations)
        self.tracks: list[Track] = []
        self._next_gid = 1
        self.frames: list[TwinFrame] = []
        self.processed_frames = 0
        self.station_of: dict = {}

    def receive(self, envelope) -> None:
        ingest(self.buffer, envelope)

    def ready_frames(self, now: float) -> list[float]:
        """Frames whose bucket is complete or whose staleness window has passed."""
        out = []
        for key in sorted(self.buffer.buckets):
            ft = key / 1000.0
            bucket = self.buffer.buckets[key]
            if (self.expected and self.expected <= set(bucket)) or now - ft >= self.config.staleness - 1e-9:
                out.append(ft)
            else:
                break
        return out

    def step(self, now: float) -> list[TwinFrame]:
        """Process every ready frame in time order; returns the new twin frames."""
        new = []
        for ft in self.ready_frames(now):
            bucket = self.buffer.buckets.pop(self.buffer.key(ft))
            msgs = [bucket[k] for k in sorted(bucket)]
            new.append(self.process_frame(ft, msgs))
            self.buffer.closed_before = max(self.buffer.closed_before, ft)
        return new

    def _new_track(self, det: DetectedObject, t: float) -> Track:
        x = np.array([det.x, det.y, det.vx, det.vy], dtype=float)
        P = np.zeros((4, 4))
        P[:2, :2] = _cov(det)
        P[2, 2] = P[3, 3] = self.config.init_vel_var
        tr = Track(self._next_gid, x, P, t, Counter({det.cls: 1}), frozenset({det.station_id}))
        self._next_gid += 1
        if self.config.confirm_hits <= 1:
            tr.confirmed = True
        return tr

    def process_frame(self, ft: float, messages: Sequence[ObjectListMessage]) -> TwinFrame:
        cfg = self.config
        for tr in self.tracks:
            predict(tr, ft, cfg.accel_psd)
        prior = {tr.global_id: (tr.x.copy(), tr.P.copy()) for tr in self.tracks}
        matched: dict[int, list[DetectedObject]] = defaultdict(list)
        born: set[int] = set()
        gate_sq = cfg.gate * cfg.gate
        for msg in messages:
            if not msg.objects:
                continue
            dets = msg.objects
            Z = np.array([[d.x, d.y] for d in dets])
            R = np.stack([_cov(d) for d in dets])
            lo, hi = Z[:, 0].min() - 30.0, Z[:, 0].max() + 30.0
            remaining = list(range(len(dets)))
            for confirmed_pass in (True, False):
                if not remaining:
                    break
                cands = [tr for tr in self.tracks
                         if tr.confirmed == confirmed_pass and lo <= prior[tr.global_id][0][0] <= hi]
                if not cands:
                    continue
                X = np.stack([prior[tr.global_id][0] for tr in cands])
                P = np.stack([prior[tr.global_id][1] for tr in cands])
                cost = _batch_d2(X, P, Z[remaining], R[remaining], cfg.gate_floor)
                pairs, _ = solve_gated(cost, gate_sq, cfg.greedy)
                taken = set()
                for i, jj in pairs:
                    matched[cands[i].global_id].append(dets[remaining[jj]])
                    taken.add(jj)
                remaining = [j for k, j in enumerate(remaining) if k not in taken]
            for j in remaining:
                tr = self._new_track(dets[j], ft)
                self.tracks.append(tr)
                prior[tr.global_id] = (tr.x.copy(), tr.P.copy())
                born.add(tr.global_id)
        for tr in self.tracks:
            dets = matched.get(tr.global_id)
            if not dets:
                continue
            x, P = tr.x, tr.P
            for d in dets:
                x, P = measurement_update(x, P, np.array([d.x, d.y]), _cov(d))
            tr.x, tr.P = x, P
            tr.contributors = frozenset(d.station_id for d in dets) | (
                tr.contributors if tr.global_id in born else frozenset())
            for d in dets:
                tr.classes[d.cls] += 1
        # tracks born this frame already hold their first hit; the counters
        # start moving on the next frame
        old = [tr for tr in self.tracks if tr.global_id not in born]
        fresh = [tr for tr in self.tracks if tr.global_id in born]
        self.tracks = lifecycle(old, set(matched), cfg) + fresh
        self.tracks.sort(key=lambda tr: tr.global_id)
        frame = emit_twin_frame(self.tracks, ft)
        self.frames.append(frame)
        self.processed_frames += 1
        return frame


# accuracy -------------------------------------------------------------------

@dataclass(frozen=True)
class AccuracyReport:
    rmse: float
    p95_error: float
    matched_fraction: float
    id_switches: int
    n_pairs: int = 0
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    contributors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int), repr=False)

    def stratified_p95(self, min_k: int, max_k: int = 10 ** 6) -> float:
        sel = (self.contributors >= min_k) & (self.contributors <= max_k)
        if not sel.any():
            return math.nan
        return float(np.percentile(self.errors[sel], 95))


def eval_accuracy(twin_frames: Iterable[TwinFrame], ground_truth: Mapping[float, Sequence],
                  match_radius: float = 1.0, warmup: int = 0) -> AccuracyReport:
    """Compare twin frames with ground truth on the shared clock.

    ``ground_truth`` maps frame time to ``(id, x, y)`` rows. Truth objects in
    their first ``warmup`` frames are not yet expected in the twin and are left
    out. Matching is one-to-one within ``match_radius`` metres, minimising
    total distance.
    """
    truth = {int(round(t * 1000)): rows for t, rows in ground_truth.items()}
    seen: Counter = Counter()
    errors, contrib = [], []
    total_gt = matched_gt = 0
    last_gid: dict = {}
    switches = 0
    for frame in twin_frames:
        key = int(round(frame.frame_time * 1000))
        rows = truth.get(key)
        if rows is None:
            continue
        eligible = []
        for r in rows:
            seen[r[0]] += 1
            if seen[r[0]] > warmup:
                eligible.append(r)
        total_gt += len(eligible)
        if not eligible or not frame.tracks:
            continue
        G = np.array([[r[1], r[2]] for r in eligible], dtype=float)
        E = np.array([[e.x, e.y] for e in frame.tracks], dtype=float)
        D = np.hypot(G[:, None, 0] - E[None, :, 0], G[:, None, 1] - E[None, :, 1])
        pairs, _ = solve_gated(D, match_radius)
        for i, j in pairs:
            gid = frame.tracks[j].global_id
            tid = eligible[i][0]
            errors.append(D[i, j])
            contrib.append(frame.tracks[j].n_contrib)
            matched_gt += 1
            if tid in last_gid and last_gid[tid] != gid:
                switches += 1
            last_gid[tid] = gid
    err = np.asarray(errors, dtype=float)
    rmse = float(np.sqrt(np.mean(err ** 2))) if len(err) else 0.0
    p95 = float(np.percentile(err, 95)) if len(err) else 0.0
    frac = matched_gt / total_gt if total_gt else 1.0
    return AccuracyReport(rmse, p95, frac, switches, len(err), err, np.asarray(contrib, dtype=int))


TWIN_COLUMNS = ("frame_time", "global_id", "cls", "x", "y", "vx", "vy", "quality", "n_contrib", "sigma")


def write_twin_frames(frames: Iterable[TwinFrame], path) -> Path:
    """Twin frames as one CSV row per track (empty frames leave no row)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TWIN_COLUMNS)
        for fr in frames:
            for e in fr.tracks:
                wr.writerow([repr(fr.frame_time), e.global_id, e.cls, repr(e.x), repr(e.y), repr(e.vx),
                             repr(e.vy), repr(e.quality), e.n_contrib, repr(e.sigma)])
    return path


def read_twin_frames(path) -> list[TwinFrame]:
    grouped: dict[float, list] = {}
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            grouped.setdefault(float(r["frame_time"]), []).append(
                TwinEntry(int(r["global_id"]), r["cls"], float(r["x"]), float(r["y"]), float(r["vx"]),
                          float(r["vy"]), float(r["quality"]), int(r["n_contrib"]), float(r["sigma"])))
    return [TwinFrame(t, tuple(grouped[t])) for t in sorted(grouped)]
