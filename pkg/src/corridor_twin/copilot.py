"""Traffic-signal co-pilot: SPaT-based speed planning and longitudinal control.

The planner picks the fastest constant speed that reaches the stop line
during a confident green; otherwise it plans a comfortable stop and waits for
the next green. A kinematic guard keeps the vehicle behind the stop line
whenever its predicted arrival falls into red.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NoForecastError
from .world.behavior import B_EMERGENCY, VehicleState
from .world.signals import SignalState, SpatForecast
from .world.sim import signal_obstacle_acc

CRUISE, ADAPT, STOP = "CRUISE", "ADAPT", "STOP"
REACTIVE = "REACTIVE"
TIME_TOL = 1e-9


@dataclass(frozen=True)
class CopilotParams:
    v_min_adapt: float = 5.0
    c_min: float = 0.7
    b_emergency: float = 6.0
    grid: float = 0.01
    margin: float = 1.0  # stop point distance before the line
    b_stop: float = 1.5  # planned stopping deceleration
    b_trig: float = 3.0  # guard trigger for an unplanned stop
    replan_interval: float = 1.0
    plan_range: float = 300.0
    entry_buffer: float = 0.3  # execution keeps arrival at least this long after green start

    def __post_init__(self):
        if not 0.0 <= self.c_min <= 1.0:
            raise ConfigError("c_min must lie in [0, 1]")
        if self.v_min_adapt <= 0 or self.grid <= 0:
            raise ConfigError("v_min_adapt and grid must be positive")
        if self.margin <= 0:
            raise ConfigError("stop margin must be positive")
        if min(self.b_emergency, self.b_stop, self.b_trig) <= 0:
            raise ConfigError("decelerations must be positive")
        if self.entry_buffer < 0:
            raise ConfigError("entry_buffer must be non-negative")


@dataclass(frozen=True)
class SpeedPlan:
    mode: str
    target_speed: float
    stop_point: Optional[float]
    resume_at: Optional[float]
    planned_at: float
    line_s: float = math.inf
    signal_id: Optional[str] = None
    basis: tuple = field(default=(), repr=False, compare=False)
    harsh: bool = False


def _green_ok(forecast: SpatForecast, t: np.ndarray, c_min: float) -> np.ndarray:
    ok = np.zeros(t.shape, dtype=bool)
    for ph in forecast.phases:
        if ph.state is SignalState.GREEN and ph.confidence >= c_min:
            ok |= (t >= ph.start - TIME_TOL) & (t < ph.end - TIME_TOL)
    return ok


def candidate_speeds(v_limit: float, params: CopilotParams) -> np.ndarray:
    """Grid speeds in ``[v_min_adapt, v_limit)`` in descending order (integer cents)."""
    lo = math.ceil(params.v_min_adapt / params.grid - 1e-9)
    hi = math.ceil(v_limit / params.grid - 1e-9) - 1
    k = np.arange(hi, lo - 1, -1)
    return k * params.grid


def next_green_start(forecast: SpatForecast, t: float) -> Optional[float]:
    for ph in forecast.phases:
        if ph.state is SignalState.GREEN and ph.start > t + TIME_TOL:
            return ph.start
    return None


def plan_speed(d: float, v: float, v_limit: float, forecast: SpatForecast,
               params: CopilotParams = CopilotParams(), now: Optional[float] = None,
               s: float = 0.0) -> SpeedPlan:
    """Plan the approach to a stop line ``d`` metres ahead.

    Arrival at constant speed ``c`` happens at ``now + d / c``. The line is
    passable when that instant lies in a green phase with confidence at
    least ``c_min``. ``s`` is the ego position, used to express the stop
    point in corridor coordinates.
    """
    if d < 0 or v < 0:
        raise ValueError("distance and speed must be non-negative")
    if not forecast.phases:
        raise NoForecastError(f"empty forecast for signal {forecast.signal_id}")
    now = forecast.msg_time if now is None else now
    line = s + d
    basis = forecast.phases
    if d == 0.0:
        if _green_ok(forecast, np.array([now]), params.c_min)[0]:
            return SpeedPlan(CRUISE, v_limit, None, None, now, line, forecast.signal_id, basis)
    else:
        if _green_ok(forecast, np.array([now + d / v_limit]), params.c_min)[0]:
            return SpeedPlan(CRUISE, v_limit, None, None, now, line, forecast.signal_id, basis)
        cands = candidate_speeds(v_limit, params)
        if len(cands):
            ok = _green_ok(forecast, now + d / cands, params.c_min)
            if ok.any():
                target = float(cands[int(np.argmax(ok))])
                return SpeedPlan(ADAPT, target, None, None, now, line, forecast.signal_id, basis)
    return SpeedPlan(STOP, 0.0, line - params.margin, next_green_start(forecast, now), now, line,
                     forecast.signal_id, basis)


def confidence_gate(forecast: SpatForecast, c_min: float, window: Optional[tuple[float, float]] = None) -> bool:
    """True iff every phase overlapping the arrival ``window`` has confidence >= ``c_min``.

    Without a window every phase counts.
    """
    if not forecast.phases:
        return False
    for ph in forecast.phases:
        if window is not None and (ph.end <= window[0] or ph.start > window[1]):
            continue
        if ph.confidence < c_min:
            return False
    return True


def arrival_window(d: float, v_limit: float, now: float, params: CopilotParams) -> tuple[float, float]:
    return now + d / v_limit, now + d / params.v_min_adapt


def stop_decel(v: float, gap: float) -> float:
    """Constant deceleration that stops from ``v`` within ``gap`` metres."""
    if v <= 0:
        return 0.0
    if gap <= 1e-6:
        return math.inf
    return v * v / (2.0 * gap)


def on_forecast_change(plan: SpeedPlan, new_forecast: SpatForecast, s: float, v: float,
                       v_limit: float, params: CopilotParams = CopilotParams(),
                       now: Optional[float] = None) -> SpeedPlan:
    """Replan after a forecast update; an unchanged forecast returns ``plan`` itself."""
    if new_forecast.phases == plan.basis and new_forecast.signal_id == plan.signal_id:
        return plan
    d = max(0.0, plan.line_s - s)
    new = plan_speed(d, v, v_limit, new_forecast, params, now, s)
    if new.mode == STOP and stop_decel(v, new.stop_point - s) > params.b_emergency:
        new = replace(new, harsh=True)
    return new


def plan_accel(s: float, v: float, plan: SpeedPlan, v_limit: float, a_max: float = 1.5,
               b_comf: float = 2.0, params: CopilotParams = CopilotParams()) -> float:
    """Acceleration the plan asks for, before guards and car following."""
    if plan.mode == STOP:
        a = _free_accel(v, v_limit, a_max, b_comf)
        gap = plan.stop_point - s
        if gap <= 0.05:
            return -min(B_EMERGENCY, v / 0.1) if v > 0 else 0.0
        b = stop_decel(v, gap)
        if b >= params.b_stop:
            a = min(a, -b)
        return a
    return _free_accel(v, plan.target_speed, a_max, b_comf)


def _free_accel(v: float, target: float, a_max: float, b_comf: float) -> float:
    if target <= 0:
        return -b_comf
    a = a_max * (1.0 - (v / target) ** 4)
    return max(-b_comf, a)


def guard_accel(s: float, v: float, line_s: float, arrival_state: Optional[SignalState],
                params: CopilotParams = CopilotParams()) -> float:
    """Kinematic stop-line guard.

    Returns ``inf`` (no constraint) unless arrival would fall into red (or an
    unknown state), in which case the vehicle brakes to stop ``margin``
    before the line once the needed deceleration reaches ``b_trig``.
    """
    d = line_s - s
    if d <= 0 or arrival_state in (SignalState.GREEN, SignalState.AMBER):
        return math.inf
    gap = d - params.margin
    if gap <= 0.05:
        return -min(B_EMERGENCY, v / 0.1) if v > 0 else 0.0
    b = stop_decel(v, gap)
    if b >= params.b_trig:
        return -min(b, B_EMERGENCY)
    return math.inf


def pacing_speed(d: float, now: float, target: float, forecast: Optional[SpatForecast],
                 params: CopilotParams = CopilotParams()) -> float:
    """Highest speed that does not reach the line before the targeted green opens.

    Planning assumes constant speed; a vehicle still slowing down towards its
    target would arrive early. Holding arrival ``entry_buffer`` after the
    green start keeps the discrete crossing clear of the last red tick.
    """
    if forecast is None or d <= 0 or target <= 0:
        return math.inf
    t_arr = now + d / target
    for ph in forecast.phases:
        if ph.state is SignalState.GREEN and ph.start - TIME_TOL <= t_arr < ph.end:
            t_open = ph.start + params.entry_buffer
            if now >= t_open:
                return math.inf
            return d / (t_open - now)
    return math.inf


def longitudinal_step(s: float, v: float, plan: SpeedPlan, signal_state: SignalState, dt: float,
                      v_limit: float, params: CopilotParams = CopilotParams(),
                      forecast: Optional[SpatForecast] = None, now: float = 0.0,
                      follow_acc: float = math.inf, a_max: float = 1.5, b_comf: float = 2.0) -> float:
    """One control step towards ``plan``; never exceeds ``v_limit`` after ``dt``."""
    a = plan_accel(s, v, plan, v_limit, a_max, b_comf, params)
    d = plan.line_s - s
    if d > 0 and plan.mode != STOP:
        v_pace = pacing_speed(d, now, plan.target_speed, forecast, params)
        if v_pace < plan.target_speed:
            a = min(a, _free_accel(v, v_pace, a_max, b_comf))
    if d > 0:
        if forecast is not None:
            arr = forecast.state_at(now + d / max(v, 1.0))
        else:
            arr = signal_state
        if plan.mode == STOP and signal_state is SignalState.GREEN and arr is SignalState.GREEN:
            a = _free_accel(v, v_limit, a_max, b_comf)
        a = min(a, guard_accel(s, v, plan.line_s, arr, params))
    a = min(a, follow_acc)
    if v + a * dt > v_limit:
        a = (v_limit - v) / dt
    return max(-B_EMERGENCY, a)


# agent ------------------------------------------------------------------------

TELEMETRY_COLUMNS = ("t", "vehicle_id", "mode", "target_speed", "d_to_line", "signal_state", "harsh_flag")


class CopilotAgent:
    """Equipped vehicle: owns its plan and drives the longitudinal control.

    ``spat`` maps ``(controller, t)`` to the forecast the vehicle holds;
    by default the head's own forecast, i.e. accurate SPaT.
    """

    def __init__(self, params: CopilotParams = CopilotParams(),
                 spat: Optional[Callable] = None, telemetry: Optional[list] = None):
        self.params = params
        self.spat = spat or (lambda ctrl, t: ctrl.forecast(t))
        self.plan: Optional[SpeedPlan] = None
        self.telemetry = telemetry
        self.harsh_events = 0
        self._last_plan_t = -math.inf

    def _relevant(self, fc: SpatForecast, now: float, d: float) -> tuple:
        horizon = now + d / self.params.v_min_adapt + 1.0
        return tuple(ph for ph in fc.phases if ph.end > now and ph.start <= horizon)

    def command(self, world, veh: VehicleState, follow_acc: float) -> float:
        p = world.params_for(veh)
        v_lim = min(p.v0, world.corridor.speed_limit_at(max(0.0, veh.s)))
        now = world.t
        ctrl = world.next_signal(veh.s)
        mode = CRUISE
        if ctrl is None or ctrl.head.s - veh.s > self.params.plan_range:
            self.plan = None
            a = min(_free_accel(veh.v, v_lim, p.a_max, p.b_comf), follow_acc)
            return self._finish(veh, a, v_lim, world, now, mode, v_lim, math.inf, None)
        d = ctrl.head.s - veh.s
        fc = self.spat(ctrl, now)
        usable = bool(fc.phases) and confidence_gate(
            fc, self.params.c_min, arrival_window(d, v_lim, now, self.params))
        if not usable:
            self.plan = None
            a = min(_free_accel(veh.v, v_lim, p.a_max, p.b_comf), follow_acc,
                    signal_obstacle_acc(world, veh, p))
            return self._finish(veh, a, v_lim, world, now, REACTIVE, v_lim, d, ctrl)
        relevant = self._relevant(fc, now, d)
        rel_fc = SpatForecast(fc.signal_id, fc.msg_time, relevant) if relevant else fc
        plan = self.plan
        if plan is None or plan.signal_id != ctrl.head.id:
            plan = plan_speed(d, veh.v, v_lim, rel_fc, self.params, now, veh.s)
            self._last_plan_t = now
        elif relevant != plan.basis:
            plan = on_forecast_change(plan, rel_fc, veh.s, veh.v, v_lim, self.params, now)
            self._last_plan_t = now
            if plan.harsh:
                self.harsh_events += 1
        elif now - self._last_plan_t >= self.params.replan_interval - 1e-9 or (
                plan.mode == STOP and ctrl.state is SignalState.GREEN):
            plan = plan_speed(d, veh.v, v_lim, rel_fc, self.params, now, veh.s)
            self._last_plan_t = now
        self.plan = plan
        a = longitudinal_step(veh.s, veh.v, plan, ctrl.state, world.dt, v_lim, self.params, fc, now,
                              follow_acc, p.a_max, p.b_comf)
        return self._finish(veh, a, v_lim, world, now, plan.mode, plan.target_speed, d, ctrl,
                            plan.harsh)

    def _finish(self, veh, a, v_lim, world, now, mode, target, d, ctrl, harsh=False) -> float:
        if veh.v + a * world.dt > v_lim:
            a = (v_lim - veh.v) / world.dt
        if self.telemetry is not None:
            self.telemetry.append((now, veh.id, mode, target, d,
                                   ctrl.state.value if ctrl is not None else "", int(harsh)))
        return a


def write_telemetry(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TELEMETRY_COLUMNS)
        for t, vid, mode, target, d, state, harsh in rows:
            wr.writerow([repr(round(t, 9)), vid, mode, repr(float(target)),
                         repr(float(d)), state, harsh])
    return path
