"""Traffic signal heads, their controllers and SPaT forecasts."""

from __future__ import annotations

import bisect
import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError


class SignalState(str, enum.Enum):
    RED = "RED"
    AMBER = "AMBER"
    GREEN = "GREEN"


@dataclass(frozen=True)
class FixedPlan:
    """Pre-timed cycle of ``(state, duration)`` pairs.

    ``priority_max_wait`` enables the priority hook: a request during red
    brings the next green start forward to at most that many seconds after
    the request. ``None`` disables it.
    """

    cycle: tuple[tuple[SignalState, float], ...]
    offset: float = 0.0
    priority_max_wait: float | None = None

    def __post_init__(self):
        if not self.cycle:
            raise ConfigError("fixed plan needs at least one phase")
        norm = []
        for state, duration in self.cycle:
            if duration <= 0:
                raise ConfigError(f"phase duration must be > 0, got {duration}")
            norm.append((SignalState(state), float(duration)))
        object.__setattr__(self, "cycle", tuple(norm))

    @property
    def cycle_length(self) -> float:
        return sum(d for _, d in self.cycle)


@dataclass(frozen=True)
class ActuatedPlan:
    """Gap-out actuated timing for the corridor approach.

    Red time is the service given to the (unmodelled) cross street.
    """

    min_green: float = 10.0
    max_green: float = 45.0
    gap_out: float = 3.0
    priority_request_hook: bool = False
    amber: float = 3.0
    red: float = 25.0
    min_red: float = 5.0
    detector_length: float = 40.0

    def __post_init__(self):
        if self.min_green <= 0 or self.max_green <= 0 or self.gap_out <= 0:
            raise ConfigError("actuated timings must be positive")
        if self.min_green > self.max_green:
            raise ConfigError("min_green must not exceed max_green")
        if self.amber <= 0 or self.red <= 0 or not 0 < self.min_red <= self.red:
            raise ConfigError("amber/red timings must be positive, min_red <= red")


@dataclass(frozen=True)
class SignalHead:
    id: str
    s: float
    plan: FixedPlan | ActuatedPlan


@dataclass(frozen=True)
class SpatPhase:
    state: SignalState
    start: float
    end: float
    confidence: float = 1.0


@dataclass(frozen=True)
class SpatForecast:
    signal_id: str
    msg_time: float
    phases: tuple[SpatPhase, ...]

    def __post_init__(self):
        prev_end = None
        for ph in self.phases:
            if not ph.start < ph.end:
                raise ConfigError("forecast phase must have start < end")
            if prev_end is not None and abs(ph.start - prev_end) > 1e-9:
                raise ConfigError("forecast phases must be contiguous and ordered")
            prev_end = ph.end

    def state_at(self, t: float) -> SignalState | None:
        for ph in self.phases:
            if ph.start <= t < ph.end:
                return ph.state
        return None


def _q(t: float) -> float:
    """Snap a phase boundary to the nanosecond grid the world clock uses."""
    return round(t, 9)


def fixed_state(plan: FixedPlan, t: float) -> SignalState:
    """State of a pre-timed plan at time ``t`` (pure, periodic)."""
    tau = _q((t - plan.offset) % plan.cycle_length)
    if tau >= plan.cycle_length:  # a wrap lost to rounding
        tau = 0.0
    acc = 0.0
    for state, duration in plan.cycle:
        acc += duration
        if tau < acc:
            return state
    return plan.cycle[-1][0]


class FixedController:
    """Runtime for a pre-timed head.

    Keeps an explicit timeline of upcoming phases so that priority requests
    and scheduled green-start shifts can edit it while the forecast stays
    consistent with what the head will actually show.
    """

    def __init__(self, head: SignalHead, min_red: float = 1.0, min_lead: float = 3.0):
        self.head = head
        self.plan: FixedPlan = head.plan
        self.min_red = min_red
        self.min_lead = min_lead
        self._phases: list[list] = []  # [state, start, end]
        self._seed_timeline()
        self.state = self.state_at(0.0)
        self._priority_pending = False

    def _seed_timeline(self):
        cyc = self.plan.cycle_length
        k = math.floor((0.0 - self.plan.offset) / cyc) - 1
        t = _q(self.plan.offset + k * cyc)
        idx = 0
        while t <= 0.0:
            state, dur = self.plan.cycle[idx]
            self._phases.append([state, t, _q(t + dur)])
            t = _q(t + dur)
            idx = (idx + 1) % len(self.plan.cycle)
        self._next_idx = idx
        self._prune(0.0)

    def _extend(self, until: float):
        while self._phases[-1][2] <= until:
            state, dur = self.plan.cycle[self._next_idx]
            start = self._phases[-1][2]
            self._phases.append([state, start, _q(start + dur)])
            self._next_idx = (self._next_idx + 1) % len(self.plan.cycle)

    def _prune(self, t: float):
        while len(self._phases) > 1 and self._phases[0][2] <= t - 1.0:
            self._phases.pop(0)

    def _index_at(self, t: float) -> int:
        self._extend(t)
        for i, (_, start, end) in enumerate(self._phases):
            if start <= t < end:
                return i
        raise ValueError(f"time {t} precedes the retained timeline")

    def state_at(self, t: float) -> SignalState:
        return self._phases[self._index_at(t)][0]

    def _next_red_index(self, t: float) -> int | None:
        i = self._index_at(t)
        self._extend(t + 2 * self.plan.cycle_length)
        for j in range(i, len(self._phases)):
            if self._phases[j][0] is SignalState.RED:
                return j
        return None

    def _move_red_end(self, j: int, new_end: float):
        delta = new_end - self._phases[j][2]
        if delta == 0.0:
            return
        self._phases[j][2] = _q(new_end)
        for ph in self._phases[j + 1:]:
            ph[1] = _q(ph[1] + delta)
            ph[2] = _q(ph[2] + delta)

    def shift_green_start(self, t: float, delta: float) -> float:
        """Move the next red-to-green transition by ``delta`` seconds.

        Returns the shift actually applied; shortening is limited so that the
        red phase keeps at least ``min_red`` and never ends before ``t``. A
        transition less than ``min_lead`` seconds away is already committed,
        so the shift goes to the following one.
        """
        j = self._next_red_index(t)
        if j is None:
            return 0.0
        if self._phases[j][2] - t < self.min_lead:
            j = self._next_red_index(self._phases[j][2])
            if j is None:
                return 0.0
        _, start, end = self._phases[j]
        new_end = max(end + delta, start + self.min_red, t)
        self._move_red_end(j, new_end)
        return new_end - end

    def update(self, t: float, detector_occupancy: bool = False,
               priority_request: bool = False) -> SignalState:
        if priority_request and self.plan.priority_max_wait is not None:
            self._priority_pending = True
            self._priority_deadline = _q(t + self.plan.priority_max_wait)
        if self._priority_pending:
            j = self._next_red_index(t)
            if j is not None:
                _, start, end = self._phases[j]
                if end > self._priority_deadline:
                    self._move_red_end(j, max(self._priority_deadline, start + self.min_red))
            self._priority_pending = self.state_at(t) is not SignalState.GREEN
        self.state = self.state_at(t)
        self._prune(t)
        return self.state

    def forecast(self, t: float, horizon: float = 120.0) -> SpatForecast:
        self._extend(t + horizon)
        phases = []
        for state, start, end in self._phases:
            if end <= t or start > t + horizon:
                continue
            phases.append(SpatPhase(state, start, end, 1.0))
        return SpatForecast(self.head.id, t, tuple(phases))


class ActuatedController:
    """Gap-out actuated head with an optional priority hook.

    Green lasts at least ``min_green`` and at most ``max_green``; after
    ``min_green`` it ends once the detector has been clear for ``gap_out``.
    """

    def __init__(self, head: SignalHead, uncertain_confidence: float = 0.5, min_lead: float = 3.0):
        self.head = head
        self.plan: ActuatedPlan = head.plan
        self.uncertain_confidence = uncertain_confidence
        self.min_lead = min_lead
        self.state = SignalState.GREEN
        self.phase_start = 0.0
        self.last_occupied = 0.0
        self.red_end = None
        self._priority_pending = False
        self._extra_red = 0.0

    def _phase_end_fixed(self) -> float | None:
        if self.state is SignalState.AMBER:
            return self.phase_start + self.plan.amber
        if self.state is SignalState.RED:
            return self.red_end
        return None

    def shift_green_start(self, t: float, delta: float) -> float:
        if self.state is SignalState.RED and self.red_end - t >= self.min_lead:
            new_end = max(self.red_end + delta, self.phase_start + self.plan.min_red, t)
            applied = new_end - self.red_end
            self.red_end = _q(new_end)
            return applied
        self._extra_red += delta
        return delta

    def update(self, t: float, detector_occupancy: bool = False,
               priority_request: bool = False) -> SignalState:
        p = self.plan
        if priority_request and p.priority_request_hook:
            self._priority_pending = True
        if detector_occupancy:
            self.last_occupied = t
        for _ in range(4):  # at most a few transitions per call
            if self.state is SignalState.GREEN:
                elapsed = t - self.phase_start
                if self._priority_pending:
                    self.last_occupied = t
                gapped = t - max(self.last_occupied, self.phase_start) >= p.gap_out
                if elapsed >= p.max_green or (elapsed >= p.min_green and gapped):
                    end = self.phase_start + min(
                        p.max_green, max(p.min_green, self.last_occupied - self.phase_start + p.gap_out))
                    self.state = SignalState.AMBER
                    self.phase_start = _q(min(end, t))
                    continue
                if self._priority_pending:
                    self._priority_pending = False
            elif self.state is SignalState.AMBER:
                if t >= _q(self.phase_start + p.amber):
                    start = _q(self.phase_start + p.amber)
                    self.state = SignalState.RED
                    red = max(p.min_red, p.red + self._extra_red)
                    self._extra_red = 0.0
                    if self._priority_pending:
                        red = p.min_red
                    self.phase_start = start
                    self.red_end = _q(start + red)
                    continue
            else:
                if self._priority_pending:
                    self.red_end = min(self.red_end, max(t, self.phase_start + p.min_red))
                if t >= self.red_end:
                    self.state = SignalState.GREEN
                    self.phase_start = self.red_end
                    self.last_occupied = self.phase_start
                    self._priority_pending = False
                    continue
            break
        return self.state

    def state_at(self, t: float) -> SignalState:
        return self.state

    def forecast(self, t: float, horizon: float = 120.0) -> SpatForecast:
        p = self.plan
        c_low = self.uncertain_confidence
        phases = []
        if self.state is SignalState.GREEN:
            g_end = self.phase_start + min(
                p.max_green, max(p.min_green, self.last_occupied - self.phase_start + p.gap_out))
            g_end = max(g_end, t + 1e-3)
            guaranteed = self.phase_start + p.min_green
            if guaranteed > t:
                phases.append(SpatPhase(SignalState.GREEN, self.phase_start, guaranteed, 1.0))
                if g_end > guaranteed:
                    phases.append(SpatPhase(SignalState.GREEN, guaranteed, g_end, c_low))
            else:
                phases.append(SpatPhase(SignalState.GREEN, self.phase_start, g_end, c_low))
            a_end = g_end + p.amber
            phases.append(SpatPhase(SignalState.AMBER, g_end, a_end, c_low))
            red_end = a_end + max(p.min_red, p.red + self._extra_red)
            phases.append(SpatPhase(SignalState.RED, a_end, red_end, c_low))
            conf_next = c_low
        elif self.state is SignalState.AMBER:
            a_end = self.phase_start + p.amber
            phases.append(SpatPhase(SignalState.AMBER, self.phase_start, a_end, 1.0))
            red_end = a_end + max(p.min_red, p.red + self._extra_red)
            phases.append(SpatPhase(SignalState.RED, a_end, red_end, 1.0))
            conf_next = 1.0
        else:
            red_end = self.red_end
            phases.append(SpatPhase(SignalState.RED, self.phase_start, red_end, 1.0))
            conf_next = 1.0
        # one more green: min_green guaranteed, remainder uncertain
        g1 = red_end + p.min_green
        phases.append(SpatPhase(SignalState.GREEN, red_end, g1, conf_next))
        if p.max_green > p.min_green:
            phases.append(SpatPhase(SignalState.GREEN, g1, red_end + p.max_green, c_low))
        return SpatForecast(self.head.id, t, tuple(phases))


def make_controller(head: SignalHead):
    if isinstance(head.plan, FixedPlan):
        return FixedController(head)
    return ActuatedController(head)


def signal_update(head, t: float, detector_occupancy: bool = False,
                  priority_request: bool = False) -> SignalState:
    """Advance a head to time ``t`` and return its state.

    A bare :class:`SignalHead` with a fixed plan is evaluated purely from the
    cycle; stateful behaviour (actuation, priority, shifts) needs a controller
    from :func:`make_controller`, which is updated in place.
    """
    if isinstance(head, SignalHead):
        if isinstance(head.plan, FixedPlan) and not priority_request:
            return fixed_state(head.plan, t)
        raise TypeError("stateful signal plans need a controller; use make_controller(head)")
    return head.update(t, detector_occupancy, priority_request)


SIGNAL_LOG_COLUMNS = ("t", "signal", "state")


def write_signal_log(rows, path) -> Path:
    """State changes ``(t, signal_id, state)`` in time order."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SIGNAL_LOG_COLUMNS)
        for t, sid, state in rows:
            wr.writerow([repr(float(t)), sid, state])
    return path


def read_signal_log(path) -> list[tuple[float, str, str]]:
    with Path(path).open(newline="") as fh:
        return [(float(r["t"]), r["signal"], r["state"]) for r in csv.DictReader(fh)]


def state_lookup(rows) -> dict:
    """Per signal, sorted change times and states for :func:`state_from_log`."""
    out: dict = {}
    for t, sid, state in rows:
        times, states = out.setdefault(sid, ([], []))
        times.append(t)
        states.append(state)
    return out


def state_from_log(lookup: dict, sid: str, t: float) -> str | None:
    """State of ``sid`` in force at ``t`` (the last change at or before ``t``)."""
    times, states = lookup.get(sid, ((), ()))
    k = bisect.bisect_right(times, t + 1e-9) - 1
    return states[k] if k >= 0 else None
