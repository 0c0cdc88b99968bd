"""Ground-truth world state and its deterministic step function."""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol

import numpy as np

from ..errors import CollisionStateError, ConfigError
from .behavior import (
    B_EMERGENCY,
    CLASS_DIMENSIONS,
    DriverParams,
    LaneDecision,
    LaneNeighbors,
    Neighbors,
    VehicleState,
    change_terms,
    decide_from_terms,
    idm_raw,
    lane_change_execute,
)
from .corridor import CorridorMap
from .signals import SignalState, make_controller

DT = 0.1


@dataclass(frozen=True)
class ClassProfile:
    """Per-class driver template; ``v0_cap`` limits desired speed below the posted limit."""

    params: DriverParams
    v0_cap: float = math.inf


DEFAULT_CLASS_PROFILES: dict[str, ClassProfile] = {
    "car": ClassProfile(DriverParams()),
    "truck": ClassProfile(DriverParams(T=1.8, a_max=1.0, s0=3.0), v0_cap=22.22),
    "bus": ClassProfile(DriverParams(T=1.8, a_max=1.0, s0=3.0), v0_cap=22.22),
}


@dataclass
class ActiveChange:
    y: np.ndarray
    k: int
    from_lane: int
    to_lane: int
    t_start: float
    t_end: float


@dataclass(frozen=True)
class ManeuverRecord:
    id: int
    t_start: float
    t_end: float
    from_lane: int
    to_lane: int
    new_follower_acc: float


class Agent(Protocol):
    def command(self, world: "World", veh: VehicleState, follow_acc: float) -> float: ...


@dataclass
class World:
    """Mutable world value; :func:`step_world` advances it in place."""

    corridor: CorridorMap
    dt: float = DT
    tick: int = 0
    vehicles: list[VehicleState] = field(default_factory=list)
    params: dict[int, DriverParams] = field(default_factory=dict)
    class_profiles: Mapping[str, ClassProfile] = field(default_factory=lambda: dict(DEFAULT_CLASS_PROFILES))
    maneuvers: dict[int, ActiveChange] = field(default_factory=dict)
    maneuver_log: list[ManeuverRecord] = field(default_factory=list)
    exited: list[tuple[int, float]] = field(default_factory=list)
    entry_queue: deque = field(default_factory=deque)
    next_id: int = 1
    agents: dict[int, Agent] = field(default_factory=dict)
    on_spawn: Optional[Callable[["World", VehicleState], None]] = None
    lane_change_duration: float = 3.0
    decision_interval: float = 1.0
    controllers: list = field(default_factory=list)
    priority_schedule: list[tuple[float, str]] = field(default_factory=list)
    shift_schedule: list[tuple[float, str, float]] = field(default_factory=list)
    collisions: int = 0
    min_gap: float = math.inf
    spawned_total: int = 0
    arrivals_total: int = 0
    last_spawned: int = 0
    last_exited: int = 0
    signal_log: list[tuple[float, str, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.controllers:
            self.controllers = [make_controller(h) for h in self.corridor.signals]
            for c in self.controllers:
                c.update(self.t)
                self.signal_log.append((self.t, c.head.id, c.state.value))

    @property
    def t(self) -> float:
        return round(self.tick * self.dt, 9)

    @property
    def queued(self) -> int:
        return len(self.entry_queue)

    def vehicle(self, vid: int) -> Optional[VehicleState]:
        for veh in self.vehicles:
            if veh.id == vid:
                return veh
        return None

    def y_of(self, veh: VehicleState) -> float:
        return self.corridor.lane_center(veh.lane) + veh.lat

    def center_x(self, veh: VehicleState) -> float:
        return veh.s - 0.5 * veh.length

    def params_for(self, veh: VehicleState) -> DriverParams:
        """Driver parameters with the desired speed bound to the local limit."""
        base = self.params.get(veh.id)
        if base is None:
            base = self.class_profiles.get(veh.cls, DEFAULT_CLASS_PROFILES["car"]).params
        cap = self.class_profiles.get(veh.cls, DEFAULT_CLASS_PROFILES["car"]).v0_cap
        v0 = min(cap, self.corridor.speed_limit_at(max(0.0, veh.s)))
        if base.v0 != v0:
            base = base.with_limit(v0)
        return base

    def occupied_lanes(self, veh: VehicleState) -> tuple[int, ...]:
        m = self.maneuvers.get(veh.id)
        if m is None:
            return (veh.lane,)
        return tuple(sorted({veh.lane, m.to_lane, m.from_lane}))

    def signal_state(self, head_id: str) -> SignalState:
        for c in self.controllers:
            if c.head.id == head_id:
                return c.state
        raise KeyError(head_id)

    def next_signal(self, s: float):
        """Controller of the first stop line strictly ahead of ``s``."""
        for c in self.controllers:
            if c.head.s > s:
                return c
        return None


class _LaneIndex:
    """Per-lane vehicles sorted by front position."""

    def __init__(self, world: World):
        lanes = world.corridor.lanes_per_direction
        self.lanes: list[list[VehicleState]] = [[] for _ in range(lanes)]
        for veh in world.vehicles:
            for ln in world.occupied_lanes(veh):
                self.lanes[ln].append(veh)
        self.keys: list[list[float]] = []
        for ln in self.lanes:
            ln.sort(key=lambda v: (v.s, v.id))
            self.keys.append([v.s for v in ln])

    def neighbors(self, veh: VehicleState, lane: int) -> LaneNeighbors:
        vs, ks = self.lanes[lane], self.keys[lane]
        i = bisect.bisect_left(ks, veh.s)
        j = bisect.bisect_right(ks, veh.s)
        leader = follower = None
        for cand in vs[j:]:
            if cand.id != veh.id:
                leader = cand
                break
        for cand in reversed(vs[:i]):
            if cand.id != veh.id:
                follower = cand
                break
        # equal-s vehicles in the same lane are an overlap; treat as leader
        for cand in vs[i:j]:
            if cand.id != veh.id and leader is None:
                leader = cand
        return LaneNeighbors(leader, follower)

    def add(self, veh: VehicleState, lane: int):
        i = bisect.bisect_left(self.keys[lane], veh.s)
        self.keys[lane].insert(i, veh.s)
        self.lanes[lane].insert(i, veh)


def neighbors_of(world: World, veh: VehicleState, index: Optional[_LaneIndex] = None) -> Neighbors:
    index = index or _LaneIndex(world)
    lanes = world.corridor.lanes_per_direction
    cur = index.neighbors(veh, veh.lane)
    left = index.neighbors(veh, veh.lane + 1) if veh.lane + 1 < lanes else None
    right = index.neighbors(veh, veh.lane - 1) if veh.lane - 1 >= 0 else None
    return Neighbors(cur, left, right)


def signal_obstacle_acc(world: World, veh: VehicleState, params: DriverParams) -> float:
    """Reactive-driver response to the next stop line (virtual standing obstacle)."""
    ctrl = world.next_signal(veh.s)
    if ctrl is None:
        return math.inf
    state = ctrl.state
    if state is SignalState.GREEN:
        return math.inf
    d = ctrl.head.s - veh.s
    if d <= 0:
        return math.inf
    if state is SignalState.AMBER:
        need = veh.v * veh.v / (2.0 * d)
        if need > params.b_safe:
            return math.inf
    return idm_raw(veh.v, d, veh.v, params)


def _decide_lane_changes(world: World, index: _LaneIndex):
    lanes = world.corridor.lanes_per_direction
    if lanes < 2:
        return
    decisions = []
    for veh in world.vehicles:
        if veh.id in world.maneuvers or veh.cls not in ("car", "truck", "bus") or veh.s < 0:
            continue
        p = world.params_for(veh)
        nb = neighbors_of(world, veh, index)
        terms = {}
        if nb.left is not None:
            terms[LaneDecision.LEFT] = change_terms(veh, nb.current, nb.left, p, world.params_for)
        if nb.right is not None:
            terms[LaneDecision.RIGHT] = change_terms(veh, nb.current, nb.right, p, world.params_for)
        dec = decide_from_terms(terms, p.politeness, p.lc_threshold, p.b_safe)
        if dec is not LaneDecision.STAY:
            decisions.append((veh, dec, terms[dec].new_follower_acc))
    # apply in id order; a later change is re-checked against earlier ones
    for veh, dec, nf_acc in decisions:
        target = veh.lane + (1 if dec is LaneDecision.LEFT else -1)
        p = world.params_for(veh)
        nb = index.neighbors(veh, target)
        terms = change_terms(veh, index.neighbors(veh, veh.lane), nb, p, world.params_for)
        if not terms.feasible or terms.new_follower_acc < -p.b_safe or terms.ego_new_acc < -p.b_safe:
            continue
        traj = lane_change_execute(veh, dec, world.lane_change_duration, world.dt,
                                   world.corridor.lane_width)
        t0 = world.t
        change = ActiveChange(traj.y, 0, veh.lane, target, t0, round(t0 + len(traj.y) * world.dt, 9))
        world.maneuvers[veh.id] = change
        world.maneuver_log.append(ManeuverRecord(veh.id, t0, change.t_end, veh.lane, target,
                                                 terms.new_follower_acc))
        index.add(veh, target)


def _longitudinal(world: World, index: _LaneIndex) -> dict[int, float]:
    accs = {}
    for veh in world.vehicles:
        p = world.params_for(veh)
        acc = p.a_max
        for ln in world.occupied_lanes(veh):
            leader = index.neighbors(veh, ln).leader
            if leader is None:
                a = idm_raw(veh.v, None, 0.0, p)
            else:
                gap = leader.s - leader.length - veh.s
                world.min_gap = min(world.min_gap, gap)
                if gap <= 0:
                    world.collisions += 1
                    a = -B_EMERGENCY
                else:
                    a = idm_raw(veh.v, gap, veh.v - leader.v, p)
            acc = min(acc, a)
        agent = world.agents.get(veh.id)
        if agent is not None:
            acc = agent.command(world, veh, acc)
        else:
            acc = min(acc, signal_obstacle_acc(world, veh, p))
        v_lim = world.corridor.speed_limit_at(max(0.0, veh.s))
        if veh.v + acc * world.dt > v_lim:
            acc = min(acc, (v_lim - veh.v) / world.dt)
        accs[veh.id] = max(-B_EMERGENCY, acc)
    return accs


def _integrate(veh: VehicleState, acc: float, dt: float):
    v_new = veh.v + acc * dt
    if v_new < 0.0:
        # stop inside the step
        veh.s += -veh.v * veh.v / (2.0 * acc) if acc < 0 else 0.0
        veh.v = 0.0
    else:
        veh.s += veh.v * dt + 0.5 * acc * dt * dt
        veh.v = v_new
    veh.a = acc


def _advance_lateral(world: World):
    width = world.corridor.lane_width
    done = []
    for vid, m in world.maneuvers.items():
        veh = world.vehicle(vid)
        if veh is None:
            done.append(vid)
            continue
        y = float(m.y[m.k])
        m.k += 1
        lane = min(world.corridor.lanes_per_direction - 1, max(0, int(math.floor(y / width))))
        veh.lane = lane
        veh.lat = y - (lane + 0.5) * width
        if m.k >= len(m.y):
            veh.lane, veh.lat = m.to_lane, 0.0
            done.append(vid)
    for vid in done:
        del world.maneuvers[vid]


def _update_signals(world: World):
    t = world.t
    due_prio = {sid for ts, sid in world.priority_schedule if abs(ts - t) < 0.5 * world.dt}
    for ts, sid, delta in world.shift_schedule:
        if abs(ts - t) < 0.5 * world.dt:
            for c in world.controllers:
                if c.head.id == sid:
                    c.shift_green_start(t, delta)
    for c in world.controllers:
        det = getattr(c.plan, "detector_length", 40.0)
        line = c.head.s
        occ = any(line - det <= veh.s <= line for veh in world.vehicles)
        before = c.state
        c.update(t, occ, c.head.id in due_prio)
        if c.state is not before:
            world.signal_log.append((t, c.head.id, c.state.value))


def step_world(world: World, dt: Optional[float] = None) -> World:
    """Advance ``world`` by one tick (in place) and return it.

    Order per tick: lane-change decisions (on the decision grid), longitudinal
    control, integration, lateral execution, exits, signal update, spawning.
    """
    dt = world.dt if dt is None else dt
    if not dt > 0:
        raise ConfigError("dt must be positive")
    if abs(dt - world.dt) > 1e-12:
        world.dt = dt
    index = _LaneIndex(world)
    every = max(1, int(round(world.decision_interval / world.dt)))
    if world.tick % every == 0:
        _decide_lane_changes(world, index)
    accs = _longitudinal(world, index)
    for veh in world.vehicles:
        _integrate(veh, accs[veh.id], world.dt)
    _advance_lateral(world)
    world.tick += 1
    t = world.t
    keep = []
    exited = 0
    for veh in world.vehicles:
        veh.t = t
        if veh.rear > world.corridor.length:
            world.exited.append((veh.id, t))
            world.maneuvers.pop(veh.id, None)
            world.agents.pop(veh.id, None)
            exited += 1
        else:
            keep.append(veh)
    world.vehicles = keep
    world.last_exited = exited
    world.last_spawned = 0
    _update_signals(world)
    return world


def entry_gap(world: World, lane: int) -> tuple[float, Optional[VehicleState]]:
    """Free space ahead of the entry point (s = 0) in ``lane`` and the vehicle bounding it."""
    last = None
    for veh in world.vehicles:
        if lane in world.occupied_lanes(veh) and (last is None or veh.s < last.s):
            last = veh
    if last is None:
        return math.inf, None
    return last.rear, last


def try_spawn(world: World, cls: str) -> Optional[VehicleState]:
    length, width = CLASS_DIMENSIONS.get(cls, CLASS_DIMENSIONS["car"])
    probe = VehicleState(0, cls, 0.0, 0, length=length, width=width, t=world.t)
    p = world.params_for(probe)
    best = None
    for lane in range(world.corridor.lanes_per_direction):
        gap, leader = entry_gap(world, lane)
        if gap <= p.s0 + 1.0:
            continue
        if leader is None:
            v = p.v0
        else:
            v = min(p.v0, (gap - p.s0) / p.T,
                    leader.v + math.sqrt(2.0 * p.b_comf * (gap - p.s0)))
        v = max(0.0, v)
        key = (gap, -lane)
        if best is None or key > best[0]:
            best = (key, lane, v)
    if best is None:
        return None
    _, lane, v = best
    veh = VehicleState(world.next_id, cls, 0.0, lane, 0.0, v, 0.0, length, width, world.t)
    world.next_id += 1
    world.vehicles.append(veh)
    world.spawned_total += 1
    world.last_spawned += 1
    if world.on_spawn is not None:
        world.on_spawn(world, veh)
    return veh


def demand_spawn(world: World, rate: float, mix: Mapping[str, float],
                 rng: np.random.Generator) -> World:
    """Poisson arrivals over one tick, queued FIFO at the entry.

    Arrivals that find the entry blocked stay queued (see ``world.queued``);
    nothing is dropped.
    """
    if rate < 0:
        raise ConfigError("demand rate must be non-negative")
    classes = sorted(mix)
    probs = np.array([mix[c] for c in classes], dtype=float)
    n = int(rng.poisson(rate * world.dt)) if rate > 0 else 0
    if n and probs.sum() <= 0:
        raise ConfigError("class mix has no mass")
    for _ in range(n):
        u = rng.random()
        cls = classes[int(np.searchsorted(np.cumsum(probs) / probs.sum(), u, side="right"))]
        world.entry_queue.append((world.t, cls))
        world.arrivals_total += 1
    while world.entry_queue:
        _, cls = world.entry_queue[0]
        if try_spawn(world, cls) is None:
            break
        world.entry_queue.popleft()
    return world
