import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corridor_twin.copilot import (
    ADAPT,
    CRUISE,
    STOP,
    CopilotParams,
    SpeedPlan,
    confidence_gate,
    longitudinal_step,
    on_forecast_change,
    pacing_speed,
    plan_speed,
    write_telemetry,
)
from corridor_twin.errors import ConfigError, NoForecastError
from corridor_twin.world.signals import SignalState, SpatForecast, SpatPhase

G, R, A = SignalState.GREEN, SignalState.RED, SignalState.AMBER
P = CopilotParams()


def fc(*phases, t0=0.0):
    """Build a forecast from (state, duration[, confidence]) tuples starting at t0."""
    out, t = [], t0
    for ph in phases:
        state, dur = ph[0], ph[1]
        conf = ph[2] if len(ph) > 2 else 1.0
        out.append(SpatPhase(state, t, t + dur, conf))
        t += dur
    return SpatForecast("S1", t0, tuple(out))


def scan_oracle(d, v_limit, forecast, now=0.0, v_min=5.0, c_min=0.7):
    """Plain loop over the 0.01 m/s grid, fastest first."""
    def passable(speed):
        t = now + (d / speed if d > 0 else 0.0)
        return any(ph.state is G and ph.confidence >= c_min and ph.start - 1e-9 <= t < ph.end - 1e-9
                   for ph in forecast.phases)
    if passable(v_limit):
        return CRUISE, v_limit
    cents = int(round(v_limit * 100))
    while cents / 100 >= v_limit - 1e-9:
        cents -= 1
    while cents / 100 >= v_min - 1e-9:
        if passable(cents / 100):
            return ADAPT, cents / 100
        cents -= 1
    return STOP, 0.0


# plan_speed ---------------------------------------------------------------------

def test_adapt_arrives_at_green_start():
    plan = plan_speed(200.0, 13.89, 13.89, fc((R, 20.0), (G, 20.0)))
    assert plan.mode == ADAPT and plan.target_speed == pytest.approx(10.0)
    assert (plan.mode, plan.target_speed) == scan_oracle(200.0, 13.89, fc((R, 20.0), (G, 20.0)))


def test_cruise_when_current_green_suffices():
    plan = plan_speed(100.0, 13.89, 13.89, fc((G, 10.0), (R, 30.0)))
    assert plan.mode == CRUISE and plan.target_speed == 13.89


def test_stop_below_cutoff():
    plan = plan_speed(50.0, 10.0, 13.89, fc((R, 30.0), (G, 20.0)))
    assert plan.mode == STOP and plan.resume_at == 30.0
    assert plan.stop_point < 50.0


def test_zero_distance_green_passes():
    assert plan_speed(0.0, 5.0, 13.89, fc((G, 5.0))).mode == CRUISE


def test_empty_forecast_raises():
    with pytest.raises(NoForecastError):
        plan_speed(100.0, 10.0, 13.89, SpatForecast("S1", 0.0, ()))


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        plan_speed(-1.0, 10.0, 13.89, fc((G, 5.0)))


def test_low_confidence_green_not_used():
    plan = plan_speed(200.0, 13.89, 13.89, fc((R, 20.0), (G, 20.0, 0.5)))
    assert plan.mode == STOP


phase_lists = st.lists(
    st.tuples(st.sampled_from([G, R, A]), st.floats(1.0, 40.0), st.sampled_from([1.0, 0.9, 0.5])),
    min_size=1, max_size=6)


@settings(max_examples=300, deadline=None)
@given(d=st.floats(0.0, 300.0), v_limit=st.sampled_from([8.33, 13.89, 19.44, 22.22]), phases=phase_lists)
def test_plan_matches_scan_oracle(d, v_limit, phases):
    forecast = fc(*phases)
    plan = plan_speed(d, v_limit, v_limit, forecast)
    mode, target = scan_oracle(d, v_limit, forecast)
    assert plan.mode == mode
    assert plan.target_speed == pytest.approx(target, abs=1e-9)
    if plan.mode != STOP:
        assert 0 < plan.target_speed <= v_limit
    else:
        assert plan.stop_point < d


@settings(max_examples=200, deadline=None)
@given(d=st.floats(10.0, 300.0), red=st.floats(0.5, 40.0), delta=st.floats(0.0, 20.0),
       green=st.floats(5.0, 30.0))
def test_delaying_green_never_raises_target(d, red, delta, green):
    # the green start moves later while its end stays put
    delta = min(delta, green - 0.5)
    a = plan_speed(d, 13.89, 13.89, fc((R, red), (G, green), (R, 60.0)))
    b = plan_speed(d, 13.89, 13.89, fc((R, red + delta), (G, green - delta), (R, 60.0)))
    assert b.target_speed <= a.target_speed + 1e-12


# forecast changes ---------------------------------------------------------------

def test_green_shift_lowers_adapt_speed():
    old = fc((R, 20.0), (G, 20.0))
    plan = plan_speed(200.0, 13.89, 13.89, old)
    new = on_forecast_change(plan, fc((R, 25.0), (G, 20.0)), 0.0, 13.89, 13.89)
    assert new.mode == ADAPT and new.target_speed < plan.target_speed
    assert new.target_speed == pytest.approx(8.0)


def test_green_extension_upgrades_to_cruise():
    plan = plan_speed(200.0, 13.89, 13.89, fc((R, 20.0), (G, 20.0)))
    new = on_forecast_change(plan, fc((R, 14.0), (G, 26.0)), 0.0, 13.89, 13.89)
    assert plan.mode == ADAPT and new.mode == CRUISE


def test_unchanged_forecast_is_idempotent():
    f = fc((R, 20.0), (G, 20.0))
    plan = plan_speed(200.0, 13.89, 13.89, f)
    assert on_forecast_change(plan, f, 0.0, 13.89, 13.89) is plan


def test_infeasible_stop_flags_harsh():
    plan = plan_speed(10.0, 13.89, 13.89, fc((G, 10.0)))
    new = on_forecast_change(plan, fc((R, 40.0), (G, 20.0)), 0.0, 13.89, 13.89)
    # 13.89^2 / (2 * 9) > b_emergency
    assert new.mode == STOP and new.harsh


# confidence gate ----------------------------------------------------------------

def test_confidence_gate_cases():
    assert confidence_gate(fc((G, 20.0), (R, 20.0)), 0.7)
    assert not confidence_gate(fc((G, 20.0, 0.4), (R, 20.0)), 0.7)
    far = fc((G, 30.0), (R, 30.0), (G, 30.0, 0.3))
    assert not confidence_gate(far, 0.7)
    assert confidence_gate(far, 0.7, window=(10.0, 40.0))
    assert not confidence_gate(SpatForecast("S1", 0.0, ()), 0.7)


def test_params_validation():
    with pytest.raises(ConfigError):
        CopilotParams(c_min=1.5)
    with pytest.raises(ConfigError):
        CopilotParams(v_min_adapt=0.0)


# control ------------------------------------------------------------------------

def drive(plan, s, v, state, v_limit=13.89, dt=0.1, steps=600, forecast=None):
    trace = []
    for k in range(steps):
        a = longitudinal_step(s, v, plan, state, dt, v_limit, forecast=forecast, now=k * dt)
        s += v * dt + 0.5 * a * dt * dt
        v = max(0.0, v + a * dt)
        trace.append((s, v, a))
    return trace


def test_stop_plan_settles_at_stop_point():
    line = 150.0
    plan = SpeedPlan(STOP, 0.0, line - P.margin, None, 0.0, line, "S1")
    trace = drive(plan, 0.0, 13.89, R)
    s, v, _ = trace[-1]
    assert v <= 0.05 and abs(s - plan.stop_point) <= 0.5
    assert max(x for x, _, _ in trace) < line
    # same outcome with a ten-times finer step
    fine = drive(plan, 0.0, 13.89, R, dt=0.01, steps=6000)
    assert abs(fine[-1][0] - s) <= 0.5


def test_adapt_tracks_target_monotonically():
    plan = SpeedPlan(ADAPT, 10.0, None, None, 0.0, 1e4, "S1")
    trace = drive(plan, 0.0, 13.89, G, steps=300)
    vs = np.array([v for _, v, _ in trace])
    assert np.all(np.diff(vs) <= 1e-12)
    assert abs(vs[-1] - 10.0) <= 0.1


def test_green_while_stopped_resumes():
    plan = SpeedPlan(STOP, 0.0, 99.0, 30.0, 0.0, 100.0, "S1")
    assert longitudinal_step(99.0, 0.0, plan, G, 0.1, 13.89) > 0
    assert longitudinal_step(99.0, 0.0, plan, R, 0.1, 13.89) <= 0


@settings(max_examples=300, deadline=None)
@given(v=st.floats(0.0, 25.0), target=st.floats(5.0, 25.0), v_limit=st.floats(5.0, 25.0),
       s=st.floats(0.0, 200.0), state=st.sampled_from([G, R, A]),
       mode=st.sampled_from([CRUISE, ADAPT, STOP]))
def test_never_commands_above_limit(v, target, v_limit, s, state, mode):
    v = min(v, v_limit)
    plan = SpeedPlan(mode, 0.0 if mode == STOP else min(target, v_limit),
                     199.0 if mode == STOP else None, None, 0.0, 200.0, "S1")
    a = longitudinal_step(s, v, plan, state, 0.1, v_limit)
    assert v + a * 0.1 <= v_limit + 1e-9


def test_pacing_holds_arrival_after_green_start():
    f = fc((R, 20.0), (G, 20.0))
    v = pacing_speed(200.0, 0.0, 10.0, f)
    assert v == pytest.approx(200.0 / 20.3)
    assert pacing_speed(200.0, 0.0, 10.0, None) == math.inf


def test_telemetry_columns(tmp_path):
    rows = [(0.1, 3, ADAPT, 10.0, 120.5, "RED", 0)]
    path = write_telemetry(rows, tmp_path / "tel.csv")
    with path.open() as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["t", "vehicle_id", "mode", "target_speed", "d_to_line", "signal_state", "harsh_flag"]
    assert got[1] == ["0.1", "3", "ADAPT", "10.0", "120.5", "RED", "0"]
