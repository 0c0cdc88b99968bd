"""Experiment runner and report generator.

:func:`run_experiment` wires corridor, stations, network, fusion and
co-pilot for one seeded run and writes the run directory. :func:`report`
recomputes every metric from that directory alone.
"""

from __future__ import annotations

import copy
import csv
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from ._rng import Streams
from .copilot import CopilotAgent, CopilotParams
from .errors import ConfigError
from .fusion import FusionConfig, FusionServer, eval_accuracy, read_twin_frames, solve_gated, write_twin_frames
from .mover import BusStopScenario, parity_fraction, run_bus_stop, write_telemetry
from .netlink import EventQueue, LatencyLog, Subscriber, default_channels, read_latency_log, route_downlink, transmit
from .presets import load_scenario
from .stations import IrStationConfig, TruthSnapshot, data_rate_report, ir_sense_tick, place_stations, sense_tick
from .store import Thresholds, TrajectoryStore, config_hash, extract_events
from .world.behavior import CLASS_DIMENSIONS
from .world.corridor import build_corridor
from .world.signals import read_signal_log, state_from_log, state_lookup, write_signal_log
from .world.sim import DEFAULT_CLASS_PROFILES, World, demand_spawn, step_world

CHANNEL_MODES = ("cv2x", "itsg5")
PARAM_SECTIONS = ("fusion", "params", "options")  # free-form keyword mappings
OUT_ENV = "CORRIDOR_TWIN_OUT"
APPROACH = 200.0  # metres before a stop line in which stops and delay are counted
DEPARTURE = 100.0  # metres after the line included in the delay window
FILES = {"twin": "twin_frames.csv", "signals": "signals.csv", "latency": "latency.csv",
         "mover": "mover_telemetry.csv", "report": "report.json", "scenarios": "scenarios.csv"}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: dict
    seed: int = 1
    duration: float = 600.0
    penetration: float = 0.0
    channel_mode: str = "cv2x"
    sweep: tuple = ()

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not 0.0 <= self.penetration <= 1.0:
            raise ConfigError("penetration must lie in [0, 1]")
        if self.channel_mode not in CHANNEL_MODES:
            raise ConfigError(f"channel mode must be one of {CHANNEL_MODES}")

    def as_dict(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed, "duration": self.duration,
                "penetration": self.penetration, "channel_mode": self.channel_mode,
                "sweep": [list(a) for a in self.sweep]}


def make_config(source: Any = "urban", seed: int = 1, duration: Optional[float] = None,
                penetration: Optional[float] = None, channel_mode: Optional[str] = None,
                sweep: Sequence = ()) -> ExperimentConfig:
    """Experiment config from a preset name, config file or mapping plus overrides."""
    scen = load_scenario(source)
    try:
        build_corridor(scen)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid corridor: {exc}") from exc
    return ExperimentConfig(
        scen, int(seed),
        float(scen.get("duration", 600.0) if duration is None else duration),
        float(scen.get("copilot", {}).get("penetration", 0.0) if penetration is None else penetration),
        str(scen.get("network", {}).get("downlink", "cv2x") if channel_mode is None else channel_mode),
        tuple((k, tuple(v)) for k, v in sweep))


def parse_sweep(spec: str) -> tuple[str, tuple]:
    """``key=v1,v2`` into ``(key, (v1, v2))`` with numbers parsed where possible."""
    if "=" not in spec:
        raise ConfigError(f"sweep must look like key=v1,v2 (got {spec!r})")
    key, vals = spec.split("=", 1)
    out = []
    for v in vals.split(","):
        v = v.strip()
        if not v:
            continue
        try:
            out.append(int(v) if v.lstrip("-").isdigit() else float(v))
        except ValueError:
            out.append(v)
    if not key.strip() or not out:
        raise ConfigError(f"empty sweep axis in {spec!r}")
    return key.strip(), tuple(out)


def apply_override(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    """Set a top-level field or a dotted scenario key (``stations.spacing``)."""
    if key in ("seed", "duration", "penetration", "channel_mode"):
        d = cfg.as_dict()
        d[key] = value
        return ExperimentConfig(d["scenario"], int(d["seed"]), float(d["duration"]), float(d["penetration"]),
                                str(d["channel_mode"]), cfg.sweep)
    scen = copy.deepcopy(cfg.scenario)
    node = scen
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node and not (len(parts) > 1 and parts[-2] in PARAM_SECTIONS):
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return ExperimentConfig(scen, cfg.seed, cfg.duration, cfg.penetration, cfg.channel_mode, cfg.sweep)


# simulation ---------------------------------------------------------------------

@dataclass
class SimResult:
    world: World
    store: TrajectoryStore
    frames: list
    latency: LatencyLog
    equipped: list
    agents: dict
    stations: list
    data_rate: list
    mover: Any = None
    station_error: dict = field(default_factory=dict)


def _params(cls, values: Mapping, section: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {section} settings: {exc}") from exc


def build_stations(scen: Mapping, corridor) -> list:
    sc = scen.get("stations", {})
    opts = dict(sc.get("options", {}))
    layout = place_stations(corridor, float(sc.get("spacing", 90.0)), **opts)
    if sc.get("kind", "optical") == "ir":
        return [IrStationConfig(f"IR{i:02d}", st.s, spacing=float(sc.get("spacing", 100.0)))
                for i, st in enumerate(layout)]
    return layout


def station_detection_errors(msg, snap, match_radius: float = 1.0) -> list[tuple[str, float]]:
    """``(sensor, distance)`` for each detection matched one-to-one to a truth object."""
    if not msg.objects or len(snap.x) == 0:
        return []
    E = np.array([[o.x, o.y] for o in msg.objects], dtype=float)
    D = np.hypot(E[:, None, 0] - snap.x[None, :], E[:, None, 1] - snap.y[None, :])
    pairs, _ = solve_gated(D, match_radius)
    return [(msg.objects[i].sensor, float(D[i, j])) for i, j in pairs]


def summarize_errors(errors: Mapping[str, Sequence[tuple[str, float]]]) -> dict:
    """Per station and sensor: match count, rmse and p95 of the raw detection error."""
    out = {}
    for sid, rows in errors.items():
        by_sensor: dict = {}
        for sensor, d in rows:
            by_sensor.setdefault(sensor, []).append(d)
        out[sid] = {}
        for sensor, err in sorted(by_sensor.items()):
            e = np.asarray(err, dtype=float)
            out[sid][sensor] = {"n": int(len(e)), "rmse": float(np.sqrt(np.mean(e ** 2))),
                                "p95_error": float(np.percentile(e, 95))}
    return out


def _shock_schedule(scen: Mapping, corridor, duration: float, rng: np.random.Generator) -> list:
    sh = scen.get("shocks", {})
    n = int(sh.get("count", 0))
    if n <= 0 or not corridor.signals:
        return []
    mag = float(sh.get("magnitude", 5.0))
    out = []
    for _ in range(n):
        u = rng.random(3)
        t = round(round(u[0] * duration * 10.0) / 10.0, 9)
        head = corridor.signals[int(u[1] * len(corridor.signals))]
        out.append((t, head.id, mag if u[2] < 0.5 else -mag))
    return sorted(out)


def simulate(cfg: ExperimentConfig) -> SimResult:
    """Run the configured scenario in memory."""
    scen = cfg.scenario
    corridor = build_corridor(scen)
    streams = Streams(cfg.seed)
    world = World(corridor, class_profiles=dict(DEFAULT_CLASS_PROFILES))
    world.shift_schedule = _shock_schedule(scen, corridor, cfg.duration, streams("shocks"))
    cp = scen.get("copilot", {})
    cparams = _params(CopilotParams, cp.get("params", {}), "copilot.params")
    equipped: list[int] = []
    agents: dict[int, CopilotAgent] = {}
    rng_pen = streams("penetration")

    def on_spawn(w, veh):
        u = rng_pen.random()
        if veh.cls != "bus" and u < cfg.penetration:
            agent = CopilotAgent(cparams)
            w.agents[veh.id] = agent
            agents[veh.id] = agent
            equipped.append(veh.id)

    world.on_spawn = on_spawn
    demand = scen.get("demand", {})
    rate = float(demand.get("rate", 0.0))
    mix = dict(demand.get("mix", {"car": 1.0}))
    prio = scen.get("priority", {})
    prio_on = bool(prio.get("enabled", False))
    prio_dist = float(prio.get("request_distance", 80.0))
    requested: set = set()

    perception = bool(scen.get("perception", True))
    stations = build_stations(scen, corridor) if perception else []
    condition = scen.get("stations", {}).get("condition", "day")
    channels = default_channels()
    net = scen.get("network", {})
    uplink = channels[net.get("uplink", "uplink4g")]
    if "uplink_latency" in net:
        uplink = replace(uplink, latency_base=float(net["uplink_latency"]))
    fcfg = _params(FusionConfig, {"extent": (0.0, corridor.length), **scen.get("fusion", {})}, "fusion")
    server = FusionServer(fcfg, [s.id for s in stations])
    queue = EventQueue()
    latency = LatencyLog()
    store = TrajectoryStore()
    frames = []
    bytes_sent = {s.id: 0 for s in stations}
    det_errors: dict = {s.id: [] for s in stations}
    rng_demand = streams("demand")
    n_ticks = int(round(cfg.duration / world.dt))
    store.record_world(world)

    def deliver(now):
        for env in queue.poll(now):
            server.receive(env)
        for fr in server.step(now):
            frames.append(fr)
            store.record_twin_frame(fr, corridor.lane_width, corridor.lanes_per_direction)
            subs = [Subscriber(str(vid), world.center_x(v), world.y_of(v), (cfg.channel_mode,))
                    for vid, v in ((v.id, v) for v in world.vehicles) if vid in agents]
            if subs:
                for env in route_downlink(fr, cfg.channel_mode, "server", stations, subs, now,
                                          streams("net/down"), channels, seq=len(frames)):
                    latency.add(env)

    for _ in range(n_ticks):
        demand_spawn(world, rate, mix, rng_demand)
        step_world(world)
        t = world.t
        if prio_on:
            for veh in world.vehicles:
                if veh.cls != "bus":
                    continue
                for c in world.controllers:
                    d = c.head.s - veh.s
                    if 0.0 < d <= prio_dist and (veh.id, c.head.id) not in requested:
                        requested.add((veh.id, c.head.id))
                        world.priority_schedule.append((round(t + world.dt, 9), c.head.id))
        store.record_world(world)
        if stations:
            snap = TruthSnapshot.from_world(world)
            for st in stations:
                if isinstance(st, IrStationConfig):
                    msg = ir_sense_tick(st, snap, condition, streams("sense/" + st.id))
                else:
                    msg = sense_tick(st, snap, streams("sense/" + st.id), condition)
                bytes_sent[st.id] += msg.payload_bytes
                det_errors[st.id].extend(station_detection_errors(msg, snap))
                env = transmit(uplink, msg, st.id, round(t + st.proc_latency, 9), streams("net/up/" + st.id))
                latency.add(env)
                queue.push(env)
            deliver(t)
    if stations:
        # let messages already on the wire arrive, then close every open frame
        deliver(world.t + 1.0 + fcfg.staleness)
    rates = []
    if stations:
        agg = [SimpleNamespace(station_id=sid, payload_bytes=b) for sid, b in bytes_sent.items()]
        rates = data_rate_report(stations, cfg.duration, agg)
    mover = None
    mv = scen.get("mover", {})
    if mv.get("enabled") and corridor.bus_stops:
        stop = corridor.bus_stops[0]
        lms = tuple((m.id, m.x, m.y) for m in corridor.landmarks)
        bs = BusStopScenario(stop_s=stop.s, curb_y=stop.lateral_offset, lane_y=corridor.lane_center(0),
                             start_x=stop.s - 80.0, end_x=stop.s + 60.0, landmarks=lms,
                             actors=mv.get("actors", "none"))
        mover = run_bus_stop(cfg.seed, scenario=bs, reference=bool(mv.get("reference", True)))
    return SimResult(world, store, frames, latency, equipped, agents, stations, rates, mover,
                     summarize_errors(det_errors))


def run_experiment(cfg: ExperimentConfig, out: Any = None, run: Optional[str] = None):
    """Simulate, write the run directory and return ``(store, MetricsReport)``."""
    out = Path(out) if out is not None else default_out_root() / f"{cfg.scenario.get('name', 'run')}_seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    res = simulate(cfg)
    run = run or f"seed{cfg.seed}"
    write_twin_frames(res.frames, out / FILES["twin"])
    write_signal_log(res.world.signal_log, out / FILES["signals"])
    res.latency.write(out / FILES["latency"])
    mover_meta = None
    if res.mover is not None:
        write_telemetry(res.mover, out / FILES["mover"])
        m = res.mover
        mover_meta = {"stop_error": m.stop_error, "terminal_gap": m.terminal_gap, "min_gap": m.min_gap,
                      "curb_crossings": m.curb_crossings, "hold_events": m.hold_events, "contacts": m.contacts,
                      "min_actor_distance": m.min_actor_distance, "parity": parity_fraction(m)}
    meta = {
        "config": cfg.as_dict(),
        "config_hash": config_hash(cfg.as_dict()),
        "seed": cfg.seed,
        "duration": cfg.duration,
        "collisions": res.world.collisions,
        "min_gap": res.world.min_gap if math.isfinite(res.world.min_gap) else None,
        "harsh_events": sum(a.harsh_events for a in res.agents.values()),
        "spawned": res.world.spawned_total,
        "arrivals": res.world.arrivals_total,
        "queued_at_end": res.world.queued,
        "equipped": sorted(res.equipped),
        "stations": [s.id for s in res.stations],
        "data_rate": [asdict(r) for r in res.data_rate],
        "station_error": res.station_error,
        "shocks": [list(s) for s in res.world.shift_schedule],
        "mover": _jsonable(mover_meta),
    }
    res.store.save(out, run, _jsonable(meta))
    rep = report(out)
    (out / FILES["report"]).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    return res.store, rep


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _jsonable(x):
    if isinstance(x, float):
        return None if not math.isfinite(x) else x
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


# metrics ------------------------------------------------------------------------

@dataclass
class MetricsReport:
    runs: int = 0
    vehicles: int = 0
    accuracy: dict = field(default_factory=dict)
    stops_per_vehicle: float = 0.0
    mean_delay: float = 0.0
    by_group: dict = field(default_factory=dict)
    red_crossings: int = 0
    red_crossings_equipped: int = 0
    speed_violations_equipped: int = 0
    collisions: int = 0
    harsh_events: int = 0
    latency_ms: dict = field(default_factory=dict)
    events: dict = field(default_factory=dict)
    min_reduction_factor: Optional[float] = None
    mover: Optional[dict] = None

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def latency_percentiles(rows: Sequence[Mapping], qs=(50, 95, 99)) -> dict:
    """Per ``msg_type/channel``: delivered count, lost count and latency percentiles in ms."""
    groups: dict[str, list] = {}
    lost: dict[str, int] = {}
    for r in rows:
        key = f"{r['msg_type']}/{r['channel']}"
        groups.setdefault(key, [])
        lost.setdefault(key, 0)
        if r["rx_time"] is None:
            lost[key] += 1
        else:
            groups[key].append(1000.0 * (r["rx_time"] - r["tx_time"]))
    out = {}
    for key in sorted(groups):
        vals = np.asarray(groups[key], dtype=float)
        entry = {"n": int(len(vals)), "lost": lost[key]}
        for q in qs:
            entry[f"p{q}"] = float(np.percentile(vals, q)) if len(vals) else None
        out[key] = entry
    return out


def _crossing_time(front: np.ndarray, t: np.ndarray, target: float) -> Optional[float]:
    """Time the (non-decreasing) front position first reaches ``target``, interpolated."""
    if len(front) == 0 or front[-1] < target:
        return None
    k = int(np.searchsorted(front, target, side="left"))
    if k == 0:
        return float(t[0])
    f0, f1 = front[k - 1], front[k]
    w = 0.0 if f1 == f0 else (target - f0) / (f1 - f0)
    return float(t[k - 1] + w * (t[k] - t[k - 1]))


def signal_metrics(gt, corridor, signal_rows, equipped: Sequence[int] = (),
                   class_profiles=None) -> dict:
    """Full stops, signal delay, red-line crossings and speed violations from trajectories.

    A full stop is a drop below 0.1 m/s after moving faster than 1 m/s while
    the front is within ``APPROACH`` metres before a stop line. Delay is the
    travel time over ``[line - APPROACH, line + DEPARTURE]`` minus the time at
    the free speed. A red crossing is a step during which the front passes
    the line while the state in force at the start of the step is RED.
    """
    profiles = class_profiles or DEFAULT_CLASS_PROFILES
    eq = set(int(i) for i in equipped)
    lookup = state_lookup(signal_rows)
    stats = {"all": [0, 0, [], set()], "equipped": [0, 0, [], set()], "unequipped": [0, 0, [], set()]}
    red_all = red_eq = speed_eq = 0
    if gt is None or len(gt) == 0:
        return _signal_summary(stats, 0, 0, 0)
    for vid, g in gt.groupby("id", sort=True):
        cls = g["class"].iloc[0]
        half = CLASS_DIMENSIONS.get(cls, CLASS_DIMENSIONS["car"])[0] / 2.0
        t = g["t"].to_numpy()
        front = g["x"].to_numpy() + half
        v = g["v"].to_numpy()
        grp = "equipped" if int(vid) in eq else "unequipped"
        if int(vid) in eq:
            lim = np.array([corridor.speed_limit_at(max(0.0, f)) for f in front])
            speed_eq += int(np.sum(v > lim + 1e-6))
        cap = profiles.get(cls, profiles["car"]).v0_cap
        for head in corridor.signals:
            # red crossings
            k = np.flatnonzero((front[:-1] <= head.s) & (front[1:] > head.s))
            for i in k:
                if state_from_log(lookup, head.id, float(t[i])) == "RED":
                    red_all += 1
                    red_eq += int(int(vid) in eq)
            # stops on the approach
            zone = (front >= head.s - APPROACH) & (front <= head.s)
            stops = 0
            moving = False
            for vi, zi in zip(v, zone):
                if vi > 1.0:
                    moving = True
                elif vi < 0.1 and moving:
                    if zi:
                        stops += 1
                    moving = False
            # delay over the full window
            t_in = _crossing_time(front, t, head.s - APPROACH)
            t_out = _crossing_time(front, t, head.s + DEPARTURE)
            if t_in is None or t_out is None or front[0] > head.s - APPROACH:
                continue
            v_free = min(corridor.speed_limit_at(head.s), cap)
            delay = (t_out - t_in) - (APPROACH + DEPARTURE) / v_free
            for key in ("all", grp):
                st = stats[key]
                st[0] += stops
                st[1] += 1
                st[2].append(delay)
                st[3].add(int(vid))
    return _signal_summary(stats, red_all, red_eq, speed_eq)


def _signal_summary(stats, red_all, red_eq, speed_eq) -> dict:
    out = {"red_crossings": red_all, "red_crossings_equipped": red_eq, "speed_violations_equipped": speed_eq}
    for key, (stops, n, delays, vids) in stats.items():
        out[key] = {"vehicles": len(vids), "passages": n, "stops": stops,
                    "stops_per_vehicle": stops / len(vids) if vids else 0.0,
                    "mean_delay": float(np.mean(delays)) if delays else 0.0}
    return out


def report(run_dir) -> MetricsReport:
    """Metrics of one run directory, computed from its files only."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        return MetricsReport()
    meta = json.loads(manifest_path.read_text())
    cfg = meta.get("config", {})
    scen = cfg.get("scenario", {})
    corridor = build_corridor(scen)
    store = TrajectoryStore.load(run_dir)
    gt = store.frame("ground_truth")
    rep = MetricsReport(runs=1, vehicles=int(gt["id"].nunique()) if len(gt) else 0)
    twin_path = run_dir / FILES["twin"]
    if twin_path.is_file() and len(gt):
        frames = read_twin_frames(twin_path)
        if frames:
            truth: dict = {}
            for t, vid, x, y in zip(gt["t"], gt["id"], gt["x"], gt["y"]):
                truth.setdefault(float(t), []).append((int(vid), float(x), float(y)))
            acc = eval_accuracy(frames, truth, warmup=2)
            rep.accuracy = {"rmse": acc.rmse, "p95_error": acc.p95_error, "p95_k1": acc.stratified_p95(1, 1),
                            "p95_k2plus": acc.stratified_p95(2), "matched_fraction": acc.matched_fraction,
                            "id_switches": acc.id_switches, "n_pairs": acc.n_pairs}
    if meta.get("station_error"):
        rep.accuracy["per_station"] = meta["station_error"]
    sig_rows = read_signal_log(run_dir / FILES["signals"]) if (run_dir / FILES["signals"]).is_file() else []
    sm = signal_metrics(gt, corridor, sig_rows, meta.get("equipped", []))
    rep.stops_per_vehicle = sm.get("all", {}).get("stops_per_vehicle", 0.0)
    rep.mean_delay = sm.get("all", {}).get("mean_delay", 0.0)
    rep.by_group = {k: sm[k] for k in ("all", "equipped", "unequipped") if k in sm}
    rep.red_crossings = sm["red_crossings"]
    rep.red_crossings_equipped = sm["red_crossings_equipped"]
    rep.speed_violations_equipped = sm["speed_violations_equipped"]
    rep.collisions = int(meta.get("collisions", 0))
    rep.harsh_events = int(meta.get("harsh_events", 0))
    lat_path = run_dir / FILES["latency"]
    if lat_path.is_file():
        rep.latency_ms = latency_percentiles(read_latency_log(lat_path))
    if len(gt):
        evs = extract_events(store, Thresholds(), corridor=corridor)
        counts: dict = {}
        for e in evs:
            counts[e.kind] = counts.get(e.kind, 0) + 1
        rep.events = dict(sorted(counts.items()))
    rates = [r["reduction_factor"] for r in meta.get("data_rate", []) if r.get("reduction_factor") is not None]
    rep.min_reduction_factor = min(rates) if rates else None
    rep.mover = meta.get("mover")
    return rep


# sweeps -------------------------------------------------------------------------

SWEEP_COLUMNS = ("point", "seed", "dir", "stops_per_vehicle", "mean_delay", "p95_error", "red_crossings",
                 "collisions")


def _one(args):
    cfg, out = args
    _, rep = run_experiment(cfg, out)
    return rep.to_dict()


def run_sweep(base: ExperimentConfig, axes: Sequence[tuple[str, Sequence]], seeds: Sequence[int],
              out_root, workers: int = 1) -> list[dict]:
    """Every (sweep point, seed) replication in its own directory, plus an index CSV."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in axes]
    jobs = []
    for combo in itertools.product(*[vals for _, vals in axes]) if axes else [()]:
        point = "_".join(f"{k}={v}" for k, v in zip(keys, combo)) or "base"
        cfg = base
        for k, v in zip(keys, combo):
            cfg = apply_override(cfg, k, v)
        for seed in seeds:
            c = apply_override(cfg, "seed", int(seed))
            jobs.append((point, int(seed), c, out_root / point / f"seed_{seed}"))
    args = [(c, d) for _, _, c, d in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_one, args))
    else:
        reports = [_one(a) for a in args]
    rows = []
    with (out_root / "sweep_index.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SWEEP_COLUMNS)
        for (point, seed, _, d), rep in zip(jobs, reports):
            acc = rep.get("accuracy") or {}
            row = {"point": point, "seed": seed, "dir": str(d.relative_to(out_root)),
                   "stops_per_vehicle": rep["stops_per_vehicle"], "mean_delay": rep["mean_delay"],
                   "p95_error": acc.get("p95_error"), "red_crossings": rep["red_crossings"],
                   "collisions": rep["collisions"]}
            wr.writerow([row[c] for c in SWEEP_COLUMNS])
            rows.append(row)
    return rows
