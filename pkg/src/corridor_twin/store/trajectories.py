"""Append-only trajectory store with CSV shards and a run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

TRAJ_COLUMNS = ("t", "id", "class", "x", "y", "v", "a", "lane", "source")
SOURCES_FIXED = ("ground_truth", "fused", "vehicle_log")
MANIFEST = "manifest.json"


def valid_source(source: str) -> bool:
    if source in SOURCES_FIXED:
        return True
    return source.startswith("station_") and len(source) > len("station_")


def t_key(t: float) -> int:
    return int(round(t * 1000))


def _fmt(x: float) -> str:
    return repr(float(x))


class TrajectoryStore:
    """Rows ``(t, id, class, x, y, v, a, lane)`` grouped by source.

    Recording is append-only and idempotent on ``(source, id, t)``: a row
    whose key is already stored is ignored.
    """

    def __init__(self):
        self._rows: dict[str, list[tuple]] = {}
        self._keys: set[tuple] = set()
        self._frames: dict[str, pd.DataFrame] = {}

    def __len__(self) -> int:
        return sum(len(r) for r in self._rows.values())

    @property
    def sources(self) -> list[str]:
        return sorted(self._rows)

    def record(self, rows: Iterable[Sequence], source: str = "ground_truth") -> int:
        """Append rows for ``source``; returns the number of new rows."""
        if not valid_source(source):
            raise ValueError(f"unknown trajectory source {source!r}")
        bucket = self._rows.setdefault(source, [])
        added = 0
        for r in rows:
            t, vid, cls, x, y, v, a, lane = r[:8]
            key = (source, int(vid), t_key(t))
            if key in self._keys:
                continue
            self._keys.add(key)
            bucket.append((round(float(t), 9), int(vid), str(cls), float(x), float(y), float(v),
                           float(a), int(lane)))
            added += 1
        if added:
            self._frames.pop(source, None)
        return added

    def record_world(self, world, source: str = "ground_truth") -> int:
        """Snapshot the world's road users (centre positions)."""
        t = world.t
        rows = [(t, v.id, v.cls, v.s - 0.5 * v.length, world.y_of(v), v.v, v.a, v.lane)
                for v in world.vehicles]
        return self.record(rows, source)

    def record_twin_frame(self, frame, lane_width: float = 3.5, lanes: int = 1) -> int:
        rows = []
        for e in frame.tracks:
            lane = min(lanes - 1, max(0, int(math.floor(e.y / lane_width))))
            rows.append((frame.frame_time, e.global_id, e.cls, e.x, e.y, math.hypot(e.vx, e.vy),
                         math.nan, lane))
        return self.record(rows, "fused")

    def frame(self, source: str = "ground_truth") -> pd.DataFrame:
        """Rows of ``source`` as a DataFrame sorted by (id, t)."""
        df = self._frames.get(source)
        if df is None:
            rows = self._rows.get(source, [])
            df = pd.DataFrame(rows, columns=list(TRAJ_COLUMNS[:-1]))
            df = df.astype({"t": float, "id": np.int64, "x": float, "y": float, "v": float,
                            "a": float, "lane": np.int64})
            df = df.sort_values(["id", "t"], kind="mergesort").reset_index(drop=True)
            self._frames[source] = df
        return df

    def by_id(self, vid: int, source: str = "ground_truth") -> pd.DataFrame:
        df = self.frame(source)
        return df[df["id"] == vid].reset_index(drop=True)

    def window(self, t0: float, t1: float, source: str = "ground_truth") -> pd.DataFrame:
        df = self.frame(source)
        k = df["t"].to_numpy()
        sel = (k >= t0 - 1e-9) & (k <= t1 + 1e-9)
        return df[sel].reset_index(drop=True)

    def rows(self, source: str = "ground_truth") -> list[tuple]:
        """Stored rows of ``source`` in (id, t) order."""
        return sorted(self._rows.get(source, []), key=lambda r: (r[1], r[0]))

    # csv ----------------------------------------------------------------------

    def export_csv(self, path, sources: Optional[Sequence[str]] = None, ids: Optional[Iterable[int]] = None,
                   t_range: Optional[tuple[float, float]] = None) -> Path:
        """Write matching rows with the exact trajectory column schema.

        Rows are ordered by source, then id, then time; floats are written
        with ``repr`` so an import restores them bit for bit.
        """
        path = Path(path)
        keep_ids = None if ids is None else {int(i) for i in ids}
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(TRAJ_COLUMNS)
            for src in sorted(sources if sources is not None else self._rows):
                for t, vid, cls, x, y, v, a, lane in self.rows(src):
                    if keep_ids is not None and vid not in keep_ids:
                        continue
                    if t_range is not None and not (t_range[0] - 1e-9 <= t <= t_range[1] + 1e-9):
                        continue
                    wr.writerow([_fmt(t), vid, cls, _fmt(x), _fmt(y), _fmt(v), _fmt(a), lane, src])
        return path

    @classmethod
    def import_csv(cls, path, store: Optional["TrajectoryStore"] = None) -> "TrajectoryStore":
        store = store if store is not None else cls()
        with Path(path).open(newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            if header is None:
                return store
            if tuple(header) != TRAJ_COLUMNS:
                raise ValueError(f"unexpected trajectory header {header}")
            grouped: dict[str, list] = {}
            for r in rd:
                grouped.setdefault(r[8], []).append(
                    (float(r[0]), int(r[1]), r[2], float(r[3]), float(r[4]), float(r[5]),
                     float(r[6]), int(r[7])))
        for src, rows in grouped.items():
            store.record(rows, src)
        return store

    # shards -------------------------------------------------------------------

    def save(self, directory, run: str = "run", meta: Optional[dict] = None) -> Path:
        """Write one CSV shard per source plus a JSON manifest; returns the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        shards = {}
        for src in self.sources:
            name = f"{src}__{run}.csv"
            self.export_csv(directory / name, [src])
            shards[name] = len(self._rows[src])
        manifest = dict(meta or {})
        manifest.update({"run": run, "shards": shards, "row_counts": {s: len(self._rows[s]) for s in self.sources},
                         "sealed": True})
        mpath = directory / MANIFEST
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return mpath

    @classmethod
    def load(cls, directory) -> "TrajectoryStore":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST).read_text())
        store = cls()
        for name in sorted(manifest.get("shards", {})):
            cls.import_csv(directory / name, store)
        return store


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
