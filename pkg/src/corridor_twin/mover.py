"""Automated people mover operating a bus stop.

Landmark-based localisation, a closed-form stop trajectory towards the
curb, feed-forward plus PID tracking on a kinematic bicycle, and a
swept-area yield check against crossing pedestrians and cyclists.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares
import shapely
from shapely.geometry import LineString, Point, Polygon

from ._rng import Streams
from .errors import ConfigError, LocalizationDegraded

PHASES = ("approach", "pull_in", "dwell", "depart")
TELEMETRY_COLUMNS = ("t", "x", "y", "heading", "v", "lateral_gap", "phase", "hold_flag")
CHI2_2_95 = 5.991464547107979  # 95% quantile of chi-square with 2 dof


@dataclass(frozen=True)
class MoverParams:
    length: float = 4.5
    width: float = 2.1
    wheelbase: float = 2.9
    gap_target: float = 0.10
    gap_tol: float = 0.05
    long_tol: float = 0.15
    v_cruise: float = 5.0
    a_comf: float = 1.0
    b_hold: float = 2.0
    lateral_distance: float = 20.0
    pull_in_distance: float = 30.0
    dwell: float = 5.0
    horizon: float = 4.0  # yield look-ahead t_h
    yield_margin: float = 0.5
    max_steer: float = 0.5
    sigma_range: float = 0.05
    sigma_bearing: float = 0.002
    landmark_range: float = 40.0
    sigma_odo_v: float = 0.02
    sigma_odo_yaw: float = 0.005
    k_p: float = 2.0
    k_d: float = 3.0
    k_i: float = 0.2
    k_s: float = 1.0
    k_v: float = 2.0

    def __post_init__(self):
        if self.gap_target < 0:
            raise ConfigError("gap_target must be non-negative")
        if min(self.length, self.width, self.wheelbase, self.v_cruise, self.a_comf) <= 0:
            raise ConfigError("mover dimensions and comfort limits must be positive")
        if self.k_i < 0 or self.k_p <= 0 or self.k_d < 0:
            raise ConfigError("controller gains must be non-negative (k_p positive)")


@dataclass(frozen=True)
class PoseEstimate:
    x: float
    y: float
    heading: float
    cov: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)), compare=False)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    def radius95(self) -> float:
        """Radius of the 95% position confidence circle (largest axis)."""
        lam = float(np.max(np.linalg.eigvalsh(self.cov[:2, :2]))) if self.cov.any() else 0.0
        return math.sqrt(CHI2_2_95 * max(lam, 0.0))


def wrap(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


# localisation -------------------------------------------------------------------

def _landmark_xy(landmarks) -> dict:
    if isinstance(landmarks, Mapping):
        return {k: (float(v[0]), float(v[1])) for k, v in landmarks.items()}
    return {lm.id: (lm.x, lm.y) for lm in landmarks}


def observe_landmarks(x: float, y: float, heading: float, landmarks, rng: np.random.Generator,
                      sigma_range: float = 0.05, sigma_bearing: float = 0.002,
                      max_range: float = 40.0) -> list[tuple[str, float, float]]:
    """Noisy range/bearing observations of the landmarks in range (two draws each, fixed order)."""
    out = []
    for lid, (lx, ly) in sorted(_landmark_xy(landmarks).items()):
        z = rng.standard_normal(2)
        r = math.hypot(lx - x, ly - y)
        if r > max_range:
            continue
        b = math.atan2(ly - y, lx - x) - heading
        out.append((lid, r + sigma_range * z[0], float(wrap(b + sigma_bearing * z[1]))))
    return out


def localize(observations: Sequence[tuple], landmarks, sigma_range: float = 0.05,
             sigma_bearing: float = 0.002, guess: Optional[Sequence[float]] = None) -> PoseEstimate:
    """Weighted least-squares pose from range/bearing observations.

    Needs at least two known landmarks. The covariance is the Gauss-Newton
    inverse information, inflated by the residual variance factor when the
    fit is worse than the stated noise.
    """
    lm = _landmark_xy(landmarks)
    obs = [(lm[i], r, b) for i, r, b in observations if i in lm]
    if len(obs) < 2:
        raise LocalizationDegraded(f"{len(obs)} known landmark(s) observed, need 2")
    P = np.array([o[0] for o in obs], dtype=float)
    R = np.array([o[1] for o in obs], dtype=float)
    B = np.array([o[2] for o in obs], dtype=float)
    sr = max(sigma_range, 1e-9)
    sb = max(sigma_bearing, 1e-9)

    def resid(p):
        dx, dy = P[:, 0] - p[0], P[:, 1] - p[1]
        rr = np.hypot(dx, dy)
        bb = wrap(np.arctan2(dy, dx) - p[2] - B)
        return np.concatenate([(rr - R) / sr, bb / sb])

    def jac(p):
        dx, dy = P[:, 0] - p[0], P[:, 1] - p[1]
        r2 = dx * dx + dy * dy
        rr = np.sqrt(r2)
        J = np.empty((2 * len(P), 3))
        J[:len(P), 0] = -dx / rr / sr
        J[:len(P), 1] = -dy / rr / sr
        J[:len(P), 2] = 0.0
        J[len(P):, 0] = dy / r2 / sb
        J[len(P):, 1] = -dx / r2 / sb
        J[len(P):, 2] = -1.0 / sb
        return J

    if guess is not None:
        starts = [np.asarray(guess, dtype=float)]
    else:
        c = P.mean(axis=0)
        starts = []
        for h in np.linspace(-np.pi, np.pi, 8, endpoint=False):
            # place the start so the first landmark sits at its observed range and bearing
            ang = h + B[0]
            starts.append(np.array([P[0, 0] - R[0] * math.cos(ang), P[0, 1] - R[0] * math.sin(ang), h]))
        starts.append(np.array([c[0], c[1], 0.0]))
    best = None
    for x0 in starts:
        sol = least_squares(resid, x0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=200)
        if best is None or sol.cost < best.cost:
            best = sol
    x = best.x.copy()
    x[2] = float(wrap(x[2]))
    J = best.jac
    info = J.T @ J
    cov = np.linalg.pinv(info)
    dof = len(obs) * 2 - 3
    if dof > 0:
        cov *= max(1.0, 2.0 * best.cost / dof)
    return PoseEstimate(float(x[0]), float(x[1]), float(x[2]), 0.5 * (cov + cov.T))


class PoseFilter:
    """EKF on (x, y, heading): odometry prediction, absolute pose updates."""

    def __init__(self, pose: PoseEstimate, params: MoverParams = MoverParams()):
        self.x = pose.vector.astype(float)
        self.P = pose.cov.copy() if pose.cov.any() else np.diag([0.1, 0.1, 0.01]) ** 2
        self.params = params

    def predict(self, v: float, yaw_rate: float, dt: float):
        th = self.x[2]
        self.x = self.x + np.array([v * math.cos(th) * dt, v * math.sin(th) * dt, yaw_rate * dt])
        F = np.eye(3)
        F[0, 2] = -v * math.sin(th) * dt
        F[1, 2] = v * math.cos(th) * dt
        sv, sw = self.params.sigma_odo_v, self.params.sigma_odo_yaw
        G = np.array([[math.cos(th) * dt, 0.0], [math.sin(th) * dt, 0.0], [0.0, dt]])
        self.P = F @ self.P @ F.T + G @ np.diag([sv * sv, sw * sw]) @ G.T

    def update(self, meas: PoseEstimate):
        nu = meas.vector - self.x
        nu[2] = float(wrap(nu[2]))
        S = self.P + meas.cov
        K = self.P @ np.linalg.pinv(S)
        self.x = self.x + K @ nu
        self.x[2] = float(wrap(self.x[2]))
        self.P = (np.eye(3) - K) @ self.P
        self.P = 0.5 * (self.P + self.P.T)

    @property
    def pose(self) -> PoseEstimate:
        return PoseEstimate(float(self.x[0]), float(self.x[1]), float(self.x[2]), self.P.copy())


# trajectories -------------------------------------------------------------------

def g1(tau):
    """Quintic basis with g(0)=0, g'(0)=1 and zero value, slope and curvature at 1."""
    return tau - 6 * tau ** 3 + 8 * tau ** 4 - 3 * tau ** 5


def g2(tau):
    return tau ** 3 * (10 - 15 * tau + 6 * tau * tau)


def _d(f, tau, k=1):
    # derivatives of the polynomial bases with respect to tau
    if f is g1:
        return (1 - 18 * tau ** 2 + 32 * tau ** 3 - 15 * tau ** 4) if k == 1 else (
            -36 * tau + 96 * tau ** 2 - 60 * tau ** 3)
    return (30 * tau ** 2 * (1 - tau) ** 2) if k == 1 else (60 * tau - 180 * tau ** 2 + 120 * tau ** 3)


@dataclass(frozen=True)
class StopTrajectory:
    """Time-sampled reference; ``terminal`` is ``(stop_s, lateral_gap)``."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    heading: np.ndarray
    curvature: np.ndarray
    accel: np.ndarray
    terminal: tuple[float, float]

    @property
    def samples(self) -> list[tuple[float, float, float, float]]:
        return list(zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.v.tolist()))

    @property
    def duration(self) -> float:
        return float(self.t[-1]) if len(self.t) else 0.0

    def at(self, t: float) -> tuple[float, ...]:
        """Interpolated (x, y, v, heading, curvature, accel) at time ``t`` (clamped)."""
        if len(self.t) == 1 or t <= self.t[0]:
            i = 0
            return (self.x[i], self.y[i], self.v[i], self.heading[i], self.curvature[i], self.accel[i])
        if t >= self.t[-1]:
            return (self.x[-1], self.y[-1], 0.0 if self.v[-1] < 1e-9 else self.v[-1], self.heading[-1],
                    self.curvature[-1], 0.0 if self.v[-1] < 1e-9 else self.accel[-1])
        return tuple(float(np.interp(t, self.t, arr)) for arr in
                     (self.x, self.y, self.v, self.heading, self.curvature, self.accel))

    def y_at_x(self, x: float) -> float:
        return float(np.interp(x, self.x, self.y))


def _min_speed_ratio(n: int = 401) -> float:
    """Smallest D / (v0 T) keeping the quintic stop profile non-negative in speed."""
    tau = np.linspace(0.0, 1.0, n)[1:-1]
    # v0 * g1' + (D/T) g2' >= 0  ->  r >= -g1'/g2'
    return float(np.max(-_d(g1, tau) / _d(g2, tau)))


R_MIN = _min_speed_ratio()


def _lateral_profile(x_rel: np.ndarray, y0: float, y1: float, d_lat: float):
    u = np.clip(x_rel / d_lat, 0.0, 1.0) if d_lat > 0 else np.ones_like(x_rel)
    dy = y1 - y0
    y = y0 + dy * g2(u)
    yp = dy * _d(g2, u) / d_lat if d_lat > 0 else np.zeros_like(x_rel)
    ypp = dy * _d(g2, u, 2) / d_lat ** 2 if d_lat > 0 else np.zeros_like(x_rel)
    inside = (x_rel > 0) & (x_rel < d_lat)
    yp = np.where(inside, yp, 0.0)
    ypp = np.where(inside, ypp, 0.0)
    return y, yp, ypp


def _assemble(t, s, sd, sdd, x0, y0, y1, d_lat, terminal) -> StopTrajectory:
    y, yp, ypp = _lateral_profile(s, y0, y1, d_lat)
    heading = np.arctan(yp)
    curv = ypp / (1.0 + yp * yp) ** 1.5
    v = sd * np.sqrt(1.0 + yp * yp)
    return StopTrajectory(t, x0 + s, y, v, heading, curv, sdd, terminal)


def stop_profile_duration(D: float, v0: float, a_comf: float, v_max: float = math.inf) -> float:
    """Duration of the quintic stop profile.

    At rest the duration follows from the comfort acceleration. When moving,
    the shortest duration on a grid whose peak acceleration stays within
    ``a_comf`` and peak speed within ``v_max`` is taken; durations beyond
    ``D / (v0 R_MIN)`` would need negative speed and are excluded. If no
    duration is comfortable the one with the smallest peak acceleration wins.
    """
    if v0 <= 1e-9:
        return math.sqrt(10.0 / math.sqrt(3.0) * D / a_comf)
    tau = np.linspace(0.0, 1.0, 201)
    t_hi = D / (v0 * R_MIN)
    Ts = np.geomspace(t_hi / 100.0, t_hi, 600)
    a1, a2 = _d(g1, tau, 2), _d(g2, tau, 2)
    v1, v2 = _d(g1, tau), _d(g2, tau)
    peak_a = np.abs(np.outer(v0 / Ts, a1) + np.outer(D / Ts ** 2, a2)).max(axis=1)
    peak_v = (np.outer(np.full_like(Ts, v0), v1) + np.outer(D / Ts, v2)).max(axis=1)
    ok = (peak_a <= a_comf + 1e-12) & (peak_v <= max(v_max, v0) + 1e-9)
    if ok.any():
        return float(Ts[int(np.argmax(ok))])
    return float(Ts[int(np.argmin(peak_a))])


def plan_bus_stop(pose: PoseEstimate, bus_stop, curb_y: Optional[float] = None,
                  params: MoverParams = MoverParams(), v0: float = 0.0, dt: float = 0.1) -> StopTrajectory:
    """Smooth pull-in to the curb ending at rest beside the stop.

    The longitudinal motion is a quintic in time from ``(x, v0, 0)`` to
    ``(stop_s, 0, 0)``; the lateral offset is a quintic in distance that
    reaches ``curb + gap_target + width/2`` before the stop, so the vehicle
    arrives parallel to the curb.
    """
    if params.gap_target < 0:
        raise ConfigError("gap_target must be non-negative")
    stop_s = float(bus_stop.s)
    curb = float(bus_stop.lateral_offset if curb_y is None else curb_y)
    y_final = curb + params.gap_target + 0.5 * params.width
    D = stop_s - pose.x
    if D <= 1e-9 and v0 <= 1e-9:
        z = np.zeros(1)
        return StopTrajectory(z, np.array([pose.x]), np.array([pose.y]), z, np.array([pose.heading]), z, z,
                              (stop_s, params.gap_target))
    if D <= 0:
        raise ConfigError("stop lies behind the vehicle")
    T = stop_profile_duration(D, v0, params.a_comf, params.v_cruise)
    n = max(1, int(math.ceil(T / dt - 1e-9)))
    t = np.linspace(0.0, T, n + 1)
    tau = t / T
    s = v0 * T * g1(tau) + D * g2(tau)
    sd = v0 * _d(g1, tau) + (D / T) * _d(g2, tau)
    sdd = (v0 * _d(g1, tau, 2) + (D / T) * _d(g2, tau, 2)) / T
    s[-1], sd[-1], sdd[-1] = D, 0.0, 0.0
    sd = np.maximum(sd, 0.0)
    d_lat = min(params.lateral_distance, 0.8 * D) if abs(y_final - pose.y) > 1e-12 else 0.0
    return _assemble(t, s, sd, sdd, pose.x, pose.y, y_final, d_lat, (stop_s, params.gap_target))


def plan_departure(pose: PoseEstimate, lane_y: float, params: MoverParams = MoverParams(),
                   dt: float = 0.1, run_out: float = 40.0) -> StopTrajectory:
    """Pull-out from rest back to the lane centre, accelerating to cruise speed."""
    vc = params.v_cruise
    T_acc = 1.875 * vc / params.a_comf  # peak of vc * g2'(tau) / T
    t_total = T_acc + run_out / vc
    n = int(math.ceil(t_total / dt - 1e-9))
    t = np.linspace(0.0, n * dt, n + 1)
    tau = np.clip(t / T_acc, 0.0, 1.0)
    G2 = 2.5 * tau ** 4 - 3 * tau ** 5 + tau ** 6
    s = np.where(t <= T_acc, vc * T_acc * G2, vc * T_acc * 0.5 + vc * (t - T_acc))
    sd = np.where(t <= T_acc, vc * g2(tau), vc)
    sdd = np.where(t <= T_acc, vc * _d(g2, tau) / T_acc, 0.0)
    return _assemble(t, s, sd, sdd, pose.x, pose.y, lane_y, params.lateral_distance, (math.nan, math.nan))


# tracking -----------------------------------------------------------------------

@dataclass
class MoverState:
    x: float
    y: float
    heading: float
    v: float


@dataclass
class TrackerState:
    integral: float = 0.0


def bicycle_step(state: MoverState, steer: float, accel: float, dt: float, wheelbase: float,
                 slip: float = 0.0) -> MoverState:
    """Kinematic bicycle about the reference point; ``slip`` adds a lateral drift angle."""
    v_new = max(0.0, state.v + accel * dt)
    v_mid = 0.5 * (state.v + v_new)
    th = state.heading
    x = state.x + v_mid * math.cos(th + slip) * dt
    y = state.y + v_mid * math.sin(th + slip) * dt
    th = float(wrap(th + v_mid * math.tan(steer) / wheelbase * dt))
    return MoverState(x, y, th, v_new)


def track_step(est: MoverState, trajectory: StopTrajectory, t_ref: float, dt: float,
               params: MoverParams = MoverParams(), ctl: Optional[TrackerState] = None,
               integral: bool = True) -> tuple[float, float]:
    """Steering and acceleration commands for one step.

    Lateral: feed-forward steer from path curvature plus a PID law on the
    lateral offset from the path, expressed as a lateral-acceleration demand.
    Longitudinal: reference acceleration plus position and speed feedback.
    The integrator freezes at low speed, where steering has no authority.
    """
    ctl = ctl if ctl is not None else TrackerState()
    x_r, y_r, v_r, th_r, k_r, a_r = trajectory.at(t_ref)
    y_path = trajectory.y_at_x(est.x)
    e_y = est.y - y_path
    th_path = float(np.interp(est.x, trajectory.x, trajectory.heading))
    e_th = float(wrap(est.heading - th_path))
    v = max(est.v, 0.5)
    if integral and est.v > 0.5:
        ctl.integral += e_y * dt
    u = -(params.k_p * e_y + params.k_d * v * e_th + params.k_i * ctl.integral)
    k_path = float(np.interp(est.x, trajectory.x, trajectory.curvature))
    steer = math.atan(params.wheelbase * k_path) + math.atan(params.wheelbase * u / (v * v))
    steer = max(-params.max_steer, min(params.max_steer, steer))
    acc = a_r + params.k_s * (x_r - est.x) + params.k_v * (v_r - est.v)
    acc = max(-3.0, min(params.a_comf * 1.5, acc))
    return steer, acc


# yielding -----------------------------------------------------------------------

@dataclass(frozen=True)
class Actor:
    id: str
    kind: str
    x: float
    y: float
    vx: float
    vy: float
    radius: float = 0.4


def swept_area(trajectory: StopTrajectory, t_from: float, horizon: float, width: float,
               margin: float, length: float = 0.0, pose: Optional[MoverState] = None):
    """Area covered by the body (grown by ``margin``) over the next ``horizon`` seconds.

    Body footprints at 41 plan instants, each consecutive pair joined by its
    convex hull; ``pose`` adds the current footprint in front of the plan.
    """
    t = np.linspace(t_from, t_from + horizon, 41)
    ref = np.array([trajectory.at(tt) for tt in t], dtype=float)
    x, y, h = ref[:, 0], ref[:, 1], ref[:, 3]
    if pose is not None:
        x, y, h = np.r_[pose.x, x], np.r_[pose.y, y], np.r_[pose.heading, h]
    hl, hw = 0.5 * max(length, 1e-6) + margin, 0.5 * width + margin
    a = np.array([hl, hl, -hl, -hl])
    b = np.array([hw, -hw, -hw, hw])
    c, s = np.cos(h)[:, None], np.sin(h)[:, None]
    corners = np.stack([x[:, None] + c * a - s * b, y[:, None] + s * a + c * b], axis=-1)  # (n, 4, 2)
    pairs = np.concatenate([corners[:-1], corners[1:]], axis=1).reshape(-1, 2)
    hulls = shapely.convex_hull(shapely.multipoints(pairs, indices=np.repeat(np.arange(len(x) - 1), 8)))
    return shapely.union_all(np.r_[shapely.polygons(corners[:1])[:1], hulls])


def actor_path(actor: Actor, horizon: float):
    p0 = (actor.x, actor.y)
    p1 = (actor.x + actor.vx * horizon, actor.y + actor.vy * horizon)
    if math.dist(p0, p1) < 1e-9:
        return Point(p0).buffer(actor.radius)
    return LineString([p0, p1]).buffer(actor.radius)


def yield_check(pose, trajectory: StopTrajectory, actors: Sequence[Actor], t_from: float = 0.0,
                params: MoverParams = MoverParams(), horizon: Optional[float] = None) -> str:
    """``"hold"`` iff some actor's constant-velocity path meets the planned swept area."""
    if not actors:
        return "proceed"
    h = params.horizon if horizon is None else horizon
    st = pose if isinstance(pose, MoverState) else MoverState(pose.x, pose.y, pose.heading, 0.0)
    paths = [actor_path(a, h) for a in actors]
    # cheap reject: actors far from everything the plan can reach
    reach = params.v_cruise * h + params.length + params.width + params.yield_margin + 5.0
    paths = [p for p in paths if p.distance(Point(st.x, st.y)) <= reach]
    if not paths:
        return "proceed"
    area = swept_area(trajectory, t_from, h, params.width, params.yield_margin, params.length, st)
    for p in paths:
        if area.intersects(p):
            return "hold"
    return "proceed"


def body_polygon(state: MoverState, length: float, width: float, margin: float = 0.0) -> Polygon:
    c, s = math.cos(state.heading), math.sin(state.heading)
    hl, hw = 0.5 * length + margin, 0.5 * width + margin
    corners = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
    return Polygon([(state.x + c * a - s * b, state.y + s * a + c * b) for a, b in corners])


def lateral_gap(state: MoverState, curb_y: float, params: MoverParams) -> float:
    """Distance from the lowest body corner to the curb line (negative: over the curb)."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    hl, hw = 0.5 * params.length, 0.5 * params.width
    ys = [state.y + s * a + c * b for a, b in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw))]
    return min(ys) - curb_y


# scenario runner -----------------------------------------------------------------

@dataclass
class MoverRun:
    telemetry: list = field(default_factory=list)
    truth: list = field(default_factory=list)
    stop_error: float = math.nan
    terminal_gap: float = math.nan
    min_gap: float = math.inf
    curb_crossings: int = 0
    hold_events: int = 0
    min_actor_distance: float = math.inf
    contacts: int = 0
    degraded_steps: int = 0
    parity: list = field(default_factory=list)


@dataclass(frozen=True)
class BusStopScenario:
    stop_s: float = 100.0
    curb_y: float = 0.0
    lane_y: float = 1.75
    start_x: float = 20.0
    end_x: float = 160.0
    landmarks: tuple = ()
    actors: str = "none"  # none | pedestrian | cyclist | both
    disturbance: float = 0.0  # slip angle proxy for side wind / slope, rad
    dt: float = 0.1
    t_max: float = 120.0


def default_landmarks(stop_s: float = 100.0) -> tuple:
    xs = np.arange(stop_s - 60.0, stop_s + 61.0, 15.0)
    lms = []
    for i, x in enumerate(xs):
        lms.append((f"L{i:02d}", float(x), -2.0 if i % 2 == 0 else -3.5))
    for i, x in enumerate(xs[::2]):
        lms.append((f"R{i:02d}", float(x) + 7.5, 9.0))
    return tuple(lms)


@dataclass(frozen=True)
class ActorScript:
    """Seeded variation of the scripted crossers."""

    ped_speed: float = 1.4
    ped_x: float = -18.0  # crossing position relative to the stop
    cyc_speed: float = 5.0
    cyc_lead: float = 1.0  # seconds before the end of the dwell the cyclist appears

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "ActorScript":
        u = rng.random(4)
        return cls(1.0 + 0.6 * u[0], -24.0 + 12.0 * u[1], 4.0 + 2.0 * u[2], 0.5 + 2.0 * u[3])


def _scripted_actors(kind: str, scen: BusStopScenario, t: float, x_mover: float,
                     triggers: dict, script: ActorScript = ActorScript()) -> list[Actor]:
    """Constant-velocity crossers; spawn times depend on the mover's progress."""
    out = []
    if kind in ("pedestrian", "both"):
        if "ped" not in triggers and x_mover >= scen.stop_s - 45.0:
            triggers["ped"] = t
        if "ped" in triggers:
            dt = t - triggers["ped"]
            # walks across the road ahead of the stop, from the far side to the curb
            out.append(Actor("ped", "pedestrian", scen.stop_s + script.ped_x, 8.0 - script.ped_speed * dt,
                             0.0, -script.ped_speed, 0.4))
    if kind in ("cyclist", "both"):
        if "dwell_end" in triggers and "cyc" not in triggers:
            triggers["cyc"] = triggers["dwell_end"] - script.cyc_lead
        if "cyc" in triggers:
            dt = t - triggers["cyc"]
            # passes the standing mover on its left, inside the lane it wants to re-enter
            x0 = scen.stop_s - 20.0 - script.cyc_speed * script.cyc_lead
            out.append(Actor("cyc", "bicycle", x0 + script.cyc_speed * dt, scen.curb_y + 3.2,
                             script.cyc_speed, 0.0, 0.6))
    return [a for a in out if -5.0 < a.y < 12.0 and a.x < scen.end_x + 20]


MOVER_ID = 9000


class _Reference:
    """Roadside stations and a fusion server tracking the mover (validation data)."""

    def __init__(self, scen: BusStopScenario, params: MoverParams, streams: Streams):
        from .fusion import FusionConfig, FusionServer
        from .netlink import ChannelModel
        from .stations import StationConfig

        xs = (scen.stop_s - 40.0, scen.stop_s + 40.0)
        mid = 0.5 * (xs[0] + xs[1])
        self.stations = [StationConfig("ST00", xs[0], camera_target=(mid, xs[1] + 40.0)),
                         StationConfig("ST01", xs[1], camera_target=(xs[0] - 40.0, mid))]
        self.server = FusionServer(FusionConfig(), [s.id for s in self.stations])
        self.channel = ChannelModel("uplink4g", 0.0)
        self.streams = streams
        self.params = params

    def observe(self, t: float, truth: MoverState):
        from .netlink import transmit
        from .stations import TruthSnapshot, sense_tick

        c, s = math.cos(truth.heading), math.sin(truth.heading)
        row = (MOVER_ID, "bus", truth.x, truth.y, self.params.length, self.params.width, truth.v * c, truth.v * s)
        snap = TruthSnapshot.from_rows(t, [row])
        for st in self.stations:
            msg = sense_tick(st, snap, self.streams("mover/ref/" + st.id))
            self.server.receive(transmit(self.channel, msg, st.id, t, self.streams("mover/ref/net")))
        frames = self.server.step(t)
        return frames[-1] if frames else None


def run_bus_stop(seed: int, params: MoverParams = MoverParams(), scenario: BusStopScenario = BusStopScenario(),
                 yield_active: bool = True, integral: bool = True, reference: bool = False) -> MoverRun:
    """Full approach, pull-in, dwell and departure with noisy localisation.

    With ``reference`` the mover is also observed by two roadside stations
    and tracked by a fusion server; ``MoverRun.parity`` then holds per frame
    ``(t, distance, r95_mover, r95_fused)``.
    """
    streams = Streams(seed)
    rng_obs, rng_odo = streams("mover/landmarks"), streams("mover/odometry")
    script = ActorScript.draw(streams("mover/actors"))
    lms = {i: (x, y) for i, x, y in (scenario.landmarks or default_landmarks(scenario.stop_s))}
    ref = _Reference(scenario, params, streams) if reference else None
    dt = scenario.dt
    truth = MoverState(scenario.start_x, scenario.lane_y, 0.0, params.v_cruise)
    filt = PoseFilter(PoseEstimate(truth.x, truth.y, 0.0, np.diag([0.05, 0.05, 0.005]) ** 2), params)
    run = MoverRun()
    ctl = TrackerState()
    phase = "approach"
    plan = _cruise_plan(truth.x, scenario.lane_y, params, scenario.end_x - truth.x + 60.0, dt)
    t_plan = 0.0
    dwell_until = None
    triggers: dict = {}
    holding = False
    stop_obj = BusStopRef(scenario.stop_s, scenario.curb_y)
    steer = yaw_rate = 0.0
    k = 0
    t = 0.0
    while t < scenario.t_max and truth.x < scenario.end_x:
        # localisation at time t
        obs = observe_landmarks(truth.x, truth.y, truth.heading, lms, rng_obs, params.sigma_range,
                                params.sigma_bearing, params.landmark_range)
        if k > 0:
            zv, zw = rng_odo.standard_normal(2)
            filt.predict(truth.v + params.sigma_odo_v * zv, yaw_rate + params.sigma_odo_yaw * zw, dt)
        degraded = False
        try:
            filt.update(localize(obs, lms, params.sigma_range, params.sigma_bearing, guess=filt.x))
        except LocalizationDegraded:
            degraded = True
            run.degraded_steps += 1
        est_pose = filt.pose
        est = MoverState(est_pose.x, est_pose.y, est_pose.heading, truth.v)
        actors = _scripted_actors(scenario.actors, scenario, t, truth.x, triggers, script)

        # phase logic
        if phase == "approach" and scenario.stop_s - est.x <= params.pull_in_distance:
            phase = "pull_in"
            plan, t_plan = plan_bus_stop(est_pose, stop_obj, scenario.curb_y, params, v0=truth.v, dt=dt), 0.0
        elif phase == "pull_in" and t_plan >= plan.duration and truth.v < 0.05:
            phase = "dwell"
            dwell_until = t + params.dwell
            run.stop_error = truth.x - scenario.stop_s
            run.terminal_gap = lateral_gap(truth, scenario.curb_y, params)
        elif phase == "dwell" and t >= dwell_until - 1e-9:
            triggers.setdefault("dwell_end", t)
            actors = _scripted_actors(scenario.actors, scenario, t, truth.x, triggers, script)
            phase = "depart"
            plan, t_plan = plan_departure(est_pose, scenario.lane_y, params, dt), 0.0
            ctl = TrackerState()

        hold = False
        if yield_active and phase != "dwell":
            hold = yield_check(est, plan, actors, t_plan, params) == "hold"
        if hold and not holding:
            run.hold_events += 1

        # log the state at time t
        gap_est = lateral_gap(est, scenario.curb_y, params)
        run.telemetry.append((t, est_pose.x, est_pose.y, est_pose.heading, truth.v, gap_est, phase,
                              int(hold), est_pose.radius95()))
        run.truth.append((t, truth.x, truth.y, truth.heading, truth.v))
        if ref is not None:
            frame = ref.observe(t, truth)
            if frame is not None and frame.tracks:
                e = min(frame.tracks, key=lambda e: math.hypot(e.x - est.x, e.y - est.y))
                if abs(frame.frame_time - t) < 1e-9:
                    run.parity.append((t, math.hypot(e.x - est.x, e.y - est.y), est_pose.radius95(),
                                       math.sqrt(CHI2_2_95) * e.sigma))

        # commands
        if phase == "dwell":
            steer, acc = 0.0, -truth.v / dt
        elif hold or degraded:
            # yield, or hold the last pose estimate and come to a stop
            steer = 0.0 if truth.v < 0.1 else steer
            acc = -min(params.b_hold, truth.v / dt)
        else:
            if holding:
                # resume: replan from where the vehicle stands
                if phase == "pull_in":
                    if scenario.stop_s - est.x > 0.5:
                        plan = plan_bus_stop(est_pose, stop_obj, scenario.curb_y, params, v0=truth.v, dt=dt)
                elif phase == "depart":
                    plan = plan_departure(est_pose, scenario.lane_y, params, dt)
                else:
                    plan = _cruise_plan(est.x, scenario.lane_y, params, scenario.end_x - est.x + 60.0, dt,
                                        v0=truth.v)
                t_plan = 0.0
            steer, acc = track_step(est, plan, t_plan + dt, dt, params, ctl, integral)
            t_plan += dt
        holding = hold

        new = bicycle_step(truth, steer, acc, dt, params.wheelbase, scenario.disturbance)
        yaw_rate = float(wrap(new.heading - truth.heading)) / dt
        truth = new
        k += 1
        t = round(k * dt, 9)
        gap = lateral_gap(truth, scenario.curb_y, params)
        run.min_gap = min(run.min_gap, gap)
        if gap < 0:
            run.curb_crossings += 1
        body = body_polygon(truth, params.length, params.width)
        for a in _scripted_actors(scenario.actors, scenario, t, truth.x, triggers, script):
            dist = body.distance(Point(a.x, a.y)) - a.radius
            run.min_actor_distance = min(run.min_actor_distance, dist)
            if dist <= 0:
                run.contacts += 1
    return run


@dataclass(frozen=True)
class BusStopRef:
    s: float
    lateral_offset: float


def parity_fraction(run: MoverRun) -> float:
    """Share of reference frames where pose and fused track agree within r95_mover + r95_fused."""
    if not run.parity:
        return 0.0
    ok = [d < rm + rf for _, d, rm, rf in run.parity]
    return float(np.mean(ok))


def _cruise_plan(x0: float, lane_y: float, params: MoverParams, distance: float, dt: float,
                 v0: Optional[float] = None) -> StopTrajectory:
    vc = params.v_cruise
    v0 = vc if v0 is None else v0
    T = distance / vc
    n = int(math.ceil(T / dt))
    t = np.linspace(0.0, n * dt, n + 1)
    # approach cruise speed with a first-order blend when starting slower
    tc = max(1e-9, 2.0 * abs(vc - v0) / params.a_comf)
    w = np.clip(t / tc, 0.0, 1.0)
    sd = v0 + (vc - v0) * g2(w)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (sd[1:] + sd[:-1]) * dt)])
    sdd = np.gradient(sd, dt) if len(sd) > 1 else np.zeros(1)
    return _assemble(t, s, sd, sdd, x0, lane_y, lane_y, 0.0, (math.nan, math.nan))


def write_telemetry(run: MoverRun, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TELEMETRY_COLUMNS)
        for t, x, y, h, v, gap, phase, hold, _ in run.telemetry:
            wr.writerow([repr(t), repr(float(x)), repr(float(y)), repr(float(h)), repr(float(v)),
                         repr(float(gap)), phase, hold])
    return path
