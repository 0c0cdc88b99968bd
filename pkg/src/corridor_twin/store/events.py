"""Scenario-of-interest extraction from stored trajectories."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from ..world.behavior import CLASS_DIMENSIONS
from .trajectories import TrajectoryStore

EVENT_KINDS = ("lane_change", "hard_brake", "low_ttc", "signal_pass", "bus_stop")
SCENARIO_COLUMNS = ("kind", "t_start", "t_end", "ids", "metric_keys", "metric_values")


@dataclass(frozen=True)
class Thresholds:
    a_brake: float = -3.0
    ttc: float = 2.5
    lateral_eps: float = 1e-6
    stop_speed: float = 0.1
    bus_stop_radius: float = 15.0
    dt: float = 0.1


@dataclass(frozen=True)
class ScenarioRecord:
    kind: str
    t_start: float
    t_end: float
    ids: tuple[int, ...]
    metrics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not self.t_start < self.t_end:
            raise ValueError("scenario needs t_start < t_end")


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive index ranges of consecutive True entries."""
    if not mask.any():
        return []
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def _span(t: np.ndarray, i: int, j: int, dt: float) -> tuple[float, float]:
    t0, t1 = float(t[i]), float(t[j])
    if t1 <= t0:
        t1 = t0 + dt
    return t0, t1


def hard_brake_events(df: pd.DataFrame, th: Thresholds) -> list[ScenarioRecord]:
    out = []
    for vid, g in df.groupby("id", sort=True):
        a = g["a"].to_numpy()
        t = g["t"].to_numpy()
        for i, j in _runs(np.nan_to_num(a, nan=0.0) < th.a_brake):
            t0, t1 = _span(t, i, j, th.dt)
            out.append(ScenarioRecord("hard_brake", t0, t1, (int(vid),),
                                      {"min_a": float(a[i:j + 1].min())}))
    return out


def ttc_table(df: pd.DataFrame) -> pd.DataFrame:
    """Follower/leader pairs per (t, lane) with bumper gap and time to collision."""
    if df.empty:
        return pd.DataFrame(columns=["t", "follower", "leader", "gap", "closing", "ttc"])
    half = df["class"].map(lambda c: CLASS_DIMENSIONS.get(c, CLASS_DIMENSIONS["car"])[0] / 2.0)
    d = df.assign(front=df["x"] + half, back=df["x"] - half, tk=(df["t"] * 1000).round().astype(np.int64))
    d = d.sort_values(["tk", "lane", "x"], kind="mergesort")
    same = (d["tk"].to_numpy()[1:] == d["tk"].to_numpy()[:-1]) & (
        d["lane"].to_numpy()[1:] == d["lane"].to_numpy()[:-1])
    f = d.iloc[:-1][same]
    lead = d.iloc[1:][same]
    gap = lead["back"].to_numpy() - f["front"].to_numpy()
    closing = f["v"].to_numpy() - lead["v"].to_numpy()
    with np.errstate(divide="ignore", invalid="ignore"):
        ttc = np.where(closing > 0, gap / closing, np.inf)
    return pd.DataFrame({"t": f["t"].to_numpy(), "follower": f["id"].to_numpy(), "leader": lead["id"].to_numpy(),
                         "gap": gap, "closing": closing, "ttc": ttc})


def low_ttc_events(df: pd.DataFrame, th: Thresholds) -> list[ScenarioRecord]:
    tab = ttc_table(df)
    out = []
    if tab.empty:
        return out
    for (fol, lead), g in tab.groupby(["follower", "leader"], sort=True):
        g = g.sort_values("t")
        t = g["t"].to_numpy()
        ttc = g["ttc"].to_numpy()
        low = ttc < th.ttc
        # frames must also be consecutive in time
        for i, j in _runs(low):
            k0 = i
            for k in range(i + 1, j + 2):
                if k == j + 1 or t[k] - t[k - 1] > th.dt * 1.5:
                    t0, t1 = _span(t, k0, k - 1, th.dt)
                    out.append(ScenarioRecord("low_ttc", t0, t1, (int(fol), int(lead)),
                                              {"min_ttc": float(ttc[k0:k].min())}))
                    k0 = k
    return out


def lane_change_events(df: pd.DataFrame, th: Thresholds) -> list[ScenarioRecord]:
    """A lane-index change together with the contiguous lateral sweep around it."""
    out = []
    for vid, g in df.groupby("id", sort=True):
        lane = g["lane"].to_numpy()
        y = g["y"].to_numpy()
        t = g["t"].to_numpy()
        changes = np.flatnonzero(lane[1:] != lane[:-1]) + 1
        dy = np.diff(y)
        moving = np.sign(dy) * (np.abs(dy) > th.lateral_eps)  # entry k covers samples k, k+1
        used_until = -1
        for c in changes:
            if c <= used_until:
                continue
            sign = np.sign(y[c] - y[c - 1])
            if sign == 0:
                continue
            lo = c - 1
            while lo - 1 >= 0 and moving[lo - 1] == sign:
                lo -= 1
            hi = c - 1
            while hi + 1 < len(moving) and moving[hi + 1] == sign:
                hi += 1
            i0, i1 = lo, hi + 1
            used_until = i1
            out.append(ScenarioRecord("lane_change", float(t[i0]), float(t[i1]), (int(vid),),
                                      {"from_lane": int(lane[i0]), "to_lane": int(lane[i1]),
                                       "dy": float(y[i1] - y[i0])}))
    return out


def signal_pass_events(df: pd.DataFrame, corridor, th: Thresholds) -> list[ScenarioRecord]:
    out = []
    if corridor is None or not corridor.signals:
        return out
    for vid, g in df.groupby("id", sort=True):
        half = CLASS_DIMENSIONS.get(g["class"].iloc[0], CLASS_DIMENSIONS["car"])[0] / 2.0
        front = g["x"].to_numpy() + half
        t = g["t"].to_numpy()
        v = g["v"].to_numpy()
        for head in corridor.signals:
            k = np.flatnonzero((front[:-1] <= head.s) & (front[1:] > head.s))
            for i in k:
                out.append(ScenarioRecord("signal_pass", float(t[i]), float(t[i + 1]), (int(vid),),
                                          {"signal": head.id, "v": float(v[i + 1])}))
    return out


def bus_stop_events(df: pd.DataFrame, corridor, th: Thresholds) -> list[ScenarioRecord]:
    out = []
    if corridor is None or not corridor.bus_stops:
        return out
    for vid, g in df.groupby("id", sort=True):
        if g["class"].iloc[0] not in ("bus", "mover"):
            continue
        x = g["x"].to_numpy()
        v = g["v"].to_numpy()
        t = g["t"].to_numpy()
        for stop in corridor.bus_stops:
            near = (np.abs(x - stop.s) <= th.bus_stop_radius) & (v < th.stop_speed)
            for i, j in _runs(near):
                t0, t1 = _span(t, i, j, th.dt)
                out.append(ScenarioRecord("bus_stop", t0, t1, (int(vid),),
                                          {"stop_s": stop.s, "dwell": t1 - t0}))
    return out


def extract_events(store: TrajectoryStore, thresholds: Thresholds = Thresholds(),
                   source: str = "ground_truth", corridor=None,
                   kinds: Optional[tuple[str, ...]] = None) -> list[ScenarioRecord]:
    """Scenario records of the requested ``kinds`` (all by default), time ordered."""
    df = store.frame(source)
    kinds = kinds or EVENT_KINDS
    out: list[ScenarioRecord] = []
    if "lane_change" in kinds:
        out += lane_change_events(df, thresholds)
    if "hard_brake" in kinds:
        out += hard_brake_events(df, thresholds)
    if "low_ttc" in kinds:
        out += low_ttc_events(df, thresholds)
    if "signal_pass" in kinds:
        out += signal_pass_events(df, corridor, thresholds)
    if "bus_stop" in kinds:
        out += bus_stop_events(df, corridor, thresholds)
    out.sort(key=lambda r: (r.t_start, r.kind, r.ids))
    return out


def write_scenarios(records, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SCENARIO_COLUMNS)
        for r in records:
            keys = sorted(r.metrics)
            wr.writerow([r.kind, repr(r.t_start), repr(r.t_end), ";".join(map(str, r.ids)),
                         ";".join(keys), ";".join(str(r.metrics[k]) for k in keys)])
    return path


def read_scenarios(path) -> list[ScenarioRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            keys = r["metric_keys"].split(";") if r["metric_keys"] else []
            vals = r["metric_values"].split(";") if r["metric_values"] else []
            metrics = {}
            for k, v in zip(keys, vals):
                try:
                    metrics[k] = float(v)
                except ValueError:
                    metrics[k] = v
            ids = tuple(int(i) for i in r["ids"].split(";") if i)
            out.append(ScenarioRecord(r["kind"], float(r["t_start"]), float(r["t_end"]), ids, metrics))
    return out
