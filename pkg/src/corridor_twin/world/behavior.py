"""Driver behaviour: car-following, lane-change decisions and lateral execution.

Longitudinal control is the intelligent driver model; lane-change decisions
use the incentive-plus-safety (MOBIL) criterion built on top of it, and the
lateral motion of an accepted change follows a quintic profile.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from ..errors import CollisionStateError, ConfigError, InvalidDuration

B_EMERGENCY = 9.0  # physical braking limit, m/s^2
DELTA = 4.0  # free-road acceleration exponent

MOTORIZED = frozenset({"car", "truck", "bus"})

CLASS_DIMENSIONS = {
    "car": (4.5, 1.8),
    "truck": (12.0, 2.5),
    "bus": (12.0, 2.5),
    "bicycle": (1.8, 0.6),
    "pedestrian": (0.5, 0.5),
}


@dataclass(slots=True)
class VehicleState:
    """Ground-truth kinematics of one road user; ``s`` is the front bumper."""

    id: int
    cls: str
    s: float
    lane: int
    lat: float = 0.0
    v: float = 0.0
    a: float = 0.0
    length: float = 4.5
    width: float = 1.8
    t: float = 0.0

    @property
    def rear(self) -> float:
        return self.s - self.length


@dataclass(frozen=True)
class DriverParams:
    v0: float = 13.89
    T: float = 1.5
    a_max: float = 1.5
    b_comf: float = 2.0
    s0: float = 2.0
    politeness: float = 0.3
    lc_threshold: float = 0.2
    b_safe: float = 4.0

    def __post_init__(self):
        for name in ("v0", "T", "a_max", "b_comf", "s0", "b_safe"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"DriverParams.{name} must be positive")
        if not 0.0 <= self.politeness <= 1.0:
            raise ConfigError("politeness must lie in [0, 1]")
        if self.lc_threshold < 0:
            raise ConfigError("lc_threshold must be non-negative")
        if self.b_safe < self.b_comf:
            raise ConfigError("b_safe must be >= b_comf")

    def with_limit(self, v0: float) -> "DriverParams":
        return replace(self, v0=v0)


def desired_gap(v: float, dv: float, p: DriverParams) -> float:
    return p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))


def idm_raw(v: float, gap: Optional[float], dv: float, p: DriverParams) -> float:
    """Scalar IDM acceleration; ``gap=None`` means free road."""
    acc = p.a_max * (1.0 - (v / p.v0) ** DELTA)
    if gap is not None:
        if gap <= 0.0:
            raise CollisionStateError(f"non-positive gap {gap:.3f} m")
        acc -= p.a_max * (desired_gap(v, dv, p) / gap) ** 2
    return min(p.a_max, max(-B_EMERGENCY, acc))


def gap_between(follower: VehicleState, leader: VehicleState) -> float:
    return leader.s - leader.length - follower.s


def idm_accel(ego: VehicleState, leader: Optional[VehicleState], params: DriverParams) -> float:
    """Car-following acceleration of ``ego`` behind ``leader``.

    Bounded to ``[-B_EMERGENCY, a_max]``. Raises :class:`CollisionStateError`
    when the bumper-to-bumper gap is not positive.
    """
    if leader is None:
        return idm_raw(ego.v, None, 0.0, params)
    return idm_raw(ego.v, gap_between(ego, leader), ego.v - leader.v, params)


def equilibrium_gap(v: float, p: DriverParams) -> float:
    """Gap at which a follower at speed ``v`` behind an equal-speed leader has zero acceleration."""
    ratio = 1.0 - (v / p.v0) ** DELTA
    if ratio <= 0:
        return math.inf
    return desired_gap(v, 0.0, p) / math.sqrt(ratio)


class LaneDecision(str, enum.Enum):
    STAY = "stay"
    LEFT = "change_left"
    RIGHT = "change_right"


@dataclass(frozen=True)
class LaneNeighbors:
    leader: Optional[VehicleState] = None
    follower: Optional[VehicleState] = None


@dataclass(frozen=True)
class Neighbors:
    """Surrounding vehicles of an ego; ``left``/``right`` are ``None`` when no such lane exists."""

    current: LaneNeighbors = field(default_factory=LaneNeighbors)
    left: Optional[LaneNeighbors] = None
    right: Optional[LaneNeighbors] = None


@dataclass(frozen=True)
class ChangeTerms:
    """Parameter-free pieces of the MOBIL criterion for one direction."""

    ego_gain: float
    others_gain: float
    new_follower_acc: float
    ego_new_acc: float
    feasible: bool


def _acc(follower, leader, p: DriverParams) -> float:
    if leader is None:
        return idm_raw(follower.v, None, 0.0, p)
    gap = gap_between(follower, leader)
    if gap <= 0:
        raise CollisionStateError(f"non-positive gap {gap:.3f} m")
    return idm_raw(follower.v, gap, follower.v - leader.v, p)


def change_terms(ego: VehicleState, current: LaneNeighbors, target: LaneNeighbors,
                 params: DriverParams,
                 params_of: Callable[[VehicleState], DriverParams]) -> ChangeTerms:
    try:
        a_c = _acc(ego, current.leader, params)
        a_c_new = _acc(ego, target.leader, params)
        o, n = current.follower, target.follower
        a_o = a_o_new = a_n = a_n_new = 0.0
        if o is not None:
            po = params_of(o)
            a_o = _acc(o, ego, po)
            a_o_new = _acc(o, current.leader, po)
        if n is not None:
            pn = params_of(n)
            a_n = _acc(n, target.leader, pn)
            a_n_new = _acc(n, ego, pn)
    except CollisionStateError:
        return ChangeTerms(0.0, 0.0, -math.inf, -math.inf, False)
    return ChangeTerms(a_c_new - a_c, (a_n_new - a_n) + (a_o_new - a_o), a_n_new, a_c_new, True)


def decide_from_terms(terms: dict[LaneDecision, ChangeTerms], politeness: float,
                      threshold: float, b_safe: float) -> LaneDecision:
    best, best_inc = LaneDecision.STAY, -math.inf
    for direction in (LaneDecision.LEFT, LaneDecision.RIGHT):
        tm = terms.get(direction)
        if tm is None or not tm.feasible:
            continue
        if tm.new_follower_acc < -b_safe or tm.ego_new_acc < -b_safe:
            continue
        incentive = tm.ego_gain + politeness * tm.others_gain
        if incentive > threshold and incentive > best_inc:
            best, best_inc = direction, incentive
    return best


def mobil_decide(ego: VehicleState, neighbors: Neighbors, params: DriverParams,
                 params_of: Optional[Callable[[VehicleState], DriverParams]] = None) -> LaneDecision:
    """Lane-change decision for ``ego``.

    A change is taken only if the new follower's acceleration stays above
    ``-b_safe`` and the politeness-weighted acceleration gain exceeds the
    threshold. Left wins ties.
    """
    if ego.cls not in MOTORIZED:
        return LaneDecision.STAY
    params_of = params_of or (lambda _veh: params)
    terms = {}
    if neighbors.left is not None:
        terms[LaneDecision.LEFT] = change_terms(ego, neighbors.current, neighbors.left, params, params_of)
    if neighbors.right is not None:
        terms[LaneDecision.RIGHT] = change_terms(ego, neighbors.current, neighbors.right, params, params_of)
    return decide_from_terms(terms, params.politeness, params.lc_threshold, params.b_safe)


def quintic_blend(tau):
    """Smooth 0->1 step with zero slope and curvature at both ends."""
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)


@dataclass(frozen=True)
class LateralTrajectory:
    times: np.ndarray
    y: np.ndarray
    y_start: float
    y_end: float


def lane_change_execute(ego: VehicleState, decision: LaneDecision, duration: float = 3.0,
                        dt: float = 0.1, lane_width: float = 3.5) -> LateralTrajectory:
    """Lateral positions for executing ``decision`` starting now.

    Samples are taken at ``t + k*dt`` for ``k = 1..round(duration/dt)``; the
    last sample sits exactly on the target lane centre.
    """
    if decision is LaneDecision.STAY:
        raise ValueError("nothing to execute for STAY")
    if not duration > 0:
        raise InvalidDuration(f"lane-change duration must be > 0, got {duration}")
    steps = max(1, int(round(duration / dt)))
    y0 = (ego.lane + 0.5) * lane_width + ego.lat
    target_lane = ego.lane + (1 if decision is LaneDecision.LEFT else -1)
    y1 = (target_lane + 0.5) * lane_width
    k = np.arange(1, steps + 1)
    y = y0 + (y1 - y0) * quintic_blend(k / steps)
    y[-1] = y1
    return LateralTrajectory(ego.t + k * dt, y, y0, y1)
