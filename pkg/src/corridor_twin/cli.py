"""Command-line entry point: ``corridor-twin <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 a ``--check`` threshold
failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, CorridorError, InsufficientData, PlacementError
from .harness import (CHANNEL_MODES, FILES, default_out_root, make_config, parse_sweep, report,
                      run_experiment, run_sweep)
from .presets import load_scenario
from .stations import coverage_check, place_stations
from .store import Thresholds, TrajectoryStore, calibrate_lane_change, extract_events, write_scenarios
from .store.events import EVENT_KINDS
from .world.corridor import build_corridor

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3

# thresholds applied by --check to a run report
P95_TARGET = 0.10
REDUCTION_TARGET = 100.0


def check_report(rep: dict) -> list[str]:
    """Names of the failed checks for one run report (empty when all pass)."""
    failed = []
    acc = rep.get("accuracy") or {}
    if acc.get("p95_error") is not None and not acc["p95_error"] < P95_TARGET:
        failed.append(f"p95_error {acc['p95_error']:.4f} >= {P95_TARGET}")
    if rep.get("red_crossings_equipped", 0) > 0:
        failed.append(f"red_crossings_equipped {rep['red_crossings_equipped']}")
    if rep.get("speed_violations_equipped", 0) > 0:
        failed.append(f"speed_violations_equipped {rep['speed_violations_equipped']}")
    if rep.get("collisions", 0) > 0:
        failed.append(f"collisions {rep['collisions']}")
    rf = rep.get("min_reduction_factor")
    if rf is not None and not rf > REDUCTION_TARGET:
        failed.append(f"reduction_factor {rf:.1f} <= {REDUCTION_TARGET}")
    mv = rep.get("mover") or {}
    if mv.get("contacts", 0) > 0 or mv.get("curb_crossings", 0) > 0:
        failed.append("mover contact or curb crossing")
    return failed


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _finish_checks(failed: list[str], check: bool) -> int:
    if check and failed:
        for f in failed:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = make_config(args.config, seed=args.seed, duration=args.duration,
                      penetration=args.penetration, channel_mode=args.channel_mode)
    axes = [parse_sweep(s) for s in args.sweep or []]
    out = Path(args.out) if args.out else None
    if axes or args.seeds > 1:
        root = out or default_out_root() / f"{cfg.scenario.get('name', 'run')}_sweep"
        seeds = range(args.seed, args.seed + args.seeds)
        rows = run_sweep(cfg, axes, seeds, root, workers=args.workers)
        print(f"{len(rows)} runs written under {root}")
        failed = []
        for row in rows:
            rep = json.loads((root / row["dir"] / FILES["report"]).read_text())
            failed += [f"{row['dir']}: {f}" for f in check_report(rep)]
        return _finish_checks(failed, args.check)
    _, rep = run_experiment(cfg, out)
    d = rep.to_dict()
    _emit(d)
    return _finish_checks(check_report(d), args.check)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"no run directory at {run_dir}")
    d = report(run_dir).to_dict()
    if args.write:
        (run_dir / FILES["report"]).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    _emit(d)
    return _finish_checks(check_report(d), args.check)


def _corridor_of(run_dir: Path):
    manifest = run_dir / "manifest.json"
    if not manifest.is_file():
        raise ConfigError(f"{run_dir} has no manifest.json")
    meta = json.loads(manifest.read_text())
    return build_corridor(meta["config"]["scenario"])


def cmd_extract(args) -> int:
    run_dir = Path(args.run_dir)
    corridor = _corridor_of(run_dir)
    kinds = tuple(args.kind) if args.kind else None
    th = Thresholds(a_brake=args.a_brake, ttc=args.ttc)
    recs = extract_events(TrajectoryStore.load(run_dir), th, source=args.source, corridor=corridor, kinds=kinds)
    path = write_scenarios(recs, Path(args.out) if args.out else run_dir / FILES["scenarios"])
    counts: dict = {}
    for r in recs:
        counts[r.kind] = counts.get(r.kind, 0) + 1
    _emit({"written": str(path), "counts": dict(sorted(counts.items()))})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    run_dir = Path(args.run_dir)
    corridor = _corridor_of(run_dir)
    try:
        res = calibrate_lane_change(TrajectoryStore.load(run_dir), corridor, source=args.source,
                                    min_events=args.min_events)
    except InsufficientData as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_CHECK
    _emit({"politeness": res.politeness, "lc_threshold": res.lc_threshold, "b_safe": res.b_safe,
           "balanced_accuracy": res.score, "decision_points": res.n_points, "lane_changes": res.n_changes})
    return EXIT_OK


def cmd_coverage(args) -> int:
    scen = load_scenario(args.config)
    corridor = build_corridor(scen)
    out = {}
    failed = []
    for spacing in args.spacing:
        try:
            stations = place_stations(corridor, spacing, lidar_radius=args.radius)
        except PlacementError as exc:
            raise ConfigError(str(exc)) from exc
        cov = coverage_check(stations, corridor)
        out[str(spacing)] = {"stations": len(stations), "covered": cov.covered,
                             "gaps": [list(g) for g in cov.gaps], "min_redundancy": cov.redundancy}
        if not cov.covered:
            failed.append(f"spacing {spacing}: {len(cov.gaps)} gaps")
    _emit(out)
    return _finish_checks(failed, args.check)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corridor-twin", description="Roadside digital-twin corridor simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write a run directory")
    r.add_argument("--config", default="urban", help="preset name or YAML/JSON scenario file")
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    r.add_argument("--duration", type=float, default=None)
    r.add_argument("--penetration", type=float, default=None, help="co-pilot equipped share in [0, 1]")
    r.add_argument("--channel-mode", choices=CHANNEL_MODES, default=None)
    r.add_argument("--out", default=None, help="run directory (default under $CORRIDOR_TWIN_OUT or ./runs)")
    r.add_argument("--sweep", action="append", metavar="KEY=V1,V2", help="sweep axis, repeatable")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--check", action="store_true", help="exit 3 if a target threshold fails")
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="recompute the metrics of a run directory")
    p.add_argument("run_dir")
    p.add_argument("--write", action="store_true", help="overwrite report.json")
    p.add_argument("--check", action="store_true")
    p.set_defaults(func=cmd_report)

    e = sub.add_parser("extract", help="extract scenarios of interest to CSV")
    e.add_argument("run_dir")
    e.add_argument("--kind", action="append", choices=EVENT_KINDS)
    e.add_argument("--source", default="ground_truth")
    e.add_argument("--a-brake", type=float, default=Thresholds.a_brake)
    e.add_argument("--ttc", type=float, default=Thresholds.ttc)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_extract)

    c = sub.add_parser("calibrate", help="fit lane-change parameters to a run's trajectories")
    c.add_argument("run_dir")
    c.add_argument("--source", default="ground_truth")
    c.add_argument("--min-events", type=int, default=20)
    c.set_defaults(func=cmd_calibrate)

    v = sub.add_parser("coverage", help="check LiDAR coverage of a station layout")
    v.add_argument("--config", default="urban")
    v.add_argument("--spacing", type=float, action="append", default=None)
    v.add_argument("--radius", type=float, default=50.0)
    v.add_argument("--check", action="store_true")
    v.set_defaults(func=cmd_coverage)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "spacing", "unset") is None:
        args.spacing = [60.0, 80.0, 100.0]
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorridorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
