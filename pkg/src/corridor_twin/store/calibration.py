"""Lane-change model calibration from recorded trajectories.

Decision points are rebuilt from ground-truth rows on the simulator's
decision grid. For every eligible vehicle the parameter-free MOBIL terms are
computed once; the grid search then only re-evaluates the cheap decision
rule, which keeps the fit vectorised.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import balanced_accuracy_score

from ..errors import InsufficientData
from ..world.behavior import CLASS_DIMENSIONS, MOTORIZED, VehicleState, change_terms
from ..world.sim import DEFAULT_CLASS_PROFILES, ActiveChange, World, _LaneIndex
from .events import Thresholds, lane_change_events
from .trajectories import TrajectoryStore

STAY, LEFT, RIGHT = 0, 1, 2
P_GRID = tuple(round(0.05 * k, 2) for k in range(21))
TH_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
BSAFE_GRID = (2.0, 3.0, 4.0, 5.0, 6.0)
MIN_EVENTS = 20
# feature layout per direction: ego_gain, others_gain, new_follower_acc, ego_new_acc, usable
N_FEAT = 5


def predict_decisions(X: np.ndarray, p: float, th: float, b_safe: float) -> np.ndarray:
    """Vectorised MOBIL decision rule; left wins ties (see ``decide_from_terms``)."""
    X = np.asarray(X, dtype=float)
    inc = []
    ok = []
    for k in (0, N_FEAT):
        eg, og, nf, en, usable = (X[:, k + i] for i in range(N_FEAT))
        incentive = eg + p * og
        good = (usable > 0.5) & (nf >= -b_safe) & (en >= -b_safe) & (incentive > th)
        inc.append(np.where(good, incentive, -np.inf))
        ok.append(good)
    left_wins = ok[0] & (~ok[1] | (inc[0] >= inc[1]))
    right_wins = ok[1] & ~left_wins
    return np.where(left_wins, LEFT, np.where(right_wins, RIGHT, STAY))


def balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    recalls = []
    for c in np.unique(y_true):
        sel = y_true == c
        recalls.append(float(np.mean(y_pred[sel] == c)))
    return float(np.mean(recalls)) if recalls else 0.0


class LaneChangeCalibrator(BaseEstimator, ClassifierMixin):
    """Grid-search fit of (politeness, threshold, b_safe) to observed decisions.

    ``X`` rows are precomputed MOBIL terms for the left and right options
    (see :func:`decision_points`); ``y`` holds 0 stay, 1 left, 2 right.
    Ties in the objective go to the lexicographically smallest parameter
    vector.
    """

    def __init__(self, p_grid: Sequence[float] = P_GRID, th_grid: Sequence[float] = TH_GRID,
                 b_safe_grid: Sequence[float] = BSAFE_GRID):
        self.p_grid = p_grid
        self.th_grid = th_grid
        self.b_safe_grid = b_safe_grid

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        best, best_score = None, -math.inf
        table = []
        for p, th, bs in itertools.product(sorted(self.p_grid), sorted(self.th_grid),
                                           sorted(self.b_safe_grid)):
            score = balanced_accuracy(y, predict_decisions(X, p, th, bs))
            table.append((p, th, bs, score))
            if score > best_score + 1e-12:
                best, best_score = (p, th, bs), score
        self.politeness_, self.lc_threshold_, self.b_safe_ = best
        self.best_score_ = best_score
        self.grid_scores_ = np.array(table)
        self.classes_ = np.array([STAY, LEFT, RIGHT])
        return self

    def predict(self, X):
        return predict_decisions(X, self.politeness_, self.lc_threshold_, self.b_safe_)

    def score(self, X, y, sample_weight=None):
        return balanced_accuracy_score(y, self.predict(X), sample_weight=sample_weight)


@dataclass(frozen=True)
class CalibrationResult:
    politeness: float
    lc_threshold: float
    b_safe: float
    score: float
    n_points: int
    n_changes: int

    @property
    def params(self) -> tuple[float, float, float]:
        return self.politeness, self.lc_threshold, self.b_safe


def decision_points(store: TrajectoryStore, corridor, class_profiles: Optional[Mapping] = None,
                    source: str = "ground_truth", interval: float = 1.0,
                    thresholds: Thresholds = Thresholds()) -> tuple[np.ndarray, np.ndarray]:
    """Features and observed decisions at every decision instant of the record.

    A vehicle is a decision point when it is motorised, inside the corridor
    and not already changing lanes. Vehicles in the middle of a change occupy
    both lanes, as in the simulator.
    """
    df = store.frame(source)
    profiles = dict(class_profiles or DEFAULT_CLASS_PROFILES)
    if df.empty or corridor.lanes_per_direction < 2:
        return np.zeros((0, 2 * N_FEAT)), np.zeros(0, dtype=int)
    changes = lane_change_events(df, thresholds)
    active = [(int(r.ids[0]), r.t_start, r.t_end, int(r.metrics["from_lane"]), int(r.metrics["to_lane"]))
              for r in changes]
    started = {(vid, round(t0, 6)): (LEFT if to > fr else RIGHT) for vid, t0, _, fr, to in active}
    world = World(corridor, class_profiles=profiles)
    step = int(round(interval * 1000))
    tk = (df["t"].to_numpy() * 1000).round().astype(np.int64)
    df = df.assign(tk=tk)
    df = df[df["tk"] % step == 0]
    feats, labels = [], []
    for key, g in df.groupby("tk", sort=True):
        t = key / 1000.0
        vehs = []
        for vid, cls, x, lane, v in zip(g["id"], g["class"], g["x"], g["lane"], g["v"]):
            ln, wd = CLASS_DIMENSIONS.get(cls, CLASS_DIMENSIONS["car"])
            vehs.append(VehicleState(int(vid), cls, float(x) + 0.5 * ln, int(lane), 0.0, float(v), 0.0, ln, wd, t))
        world.vehicles = vehs
        world.maneuvers = {vid: ActiveChange(np.zeros(0), 0, fr, to, t0, t1)
                           for vid, t0, t1, fr, to in active if t0 < t - 1e-9 and t < t1 - 1e-9}
        index = _LaneIndex(world)
        lanes = corridor.lanes_per_direction
        for veh in vehs:
            if veh.id in world.maneuvers or veh.cls not in MOTORIZED or veh.s < 0:
                continue
            p = world.params_for(veh)
            row = np.zeros(2 * N_FEAT)
            cur = index.neighbors(veh, veh.lane)
            for k, tgt in ((0, veh.lane + 1), (N_FEAT, veh.lane - 1)):
                if 0 <= tgt < lanes:
                    tm = change_terms(veh, cur, index.neighbors(veh, tgt), p, world.params_for)
                    if tm.feasible:
                        row[k:k + N_FEAT] = (tm.ego_gain, tm.others_gain, tm.new_follower_acc,
                                             tm.ego_new_acc, 1.0)
            feats.append(row)
            labels.append(started.get((veh.id, round(t, 6)), STAY))
    return np.array(feats).reshape(-1, 2 * N_FEAT), np.array(labels, dtype=int)


def calibrate_lane_change(store: TrajectoryStore, corridor, class_profiles: Optional[Mapping] = None,
                          source: str = "ground_truth", min_events: int = MIN_EVENTS,
                          estimator: Optional[LaneChangeCalibrator] = None) -> CalibrationResult:
    """Fit politeness, threshold and safe deceleration to the recorded decisions."""
    X, y = decision_points(store, corridor, class_profiles, source)
    n_changes = int(np.sum(y != STAY))
    if n_changes < min_events:
        raise InsufficientData(f"{n_changes} lane changes recorded, need at least {min_events}")
    est = (estimator or LaneChangeCalibrator()).fit(X, y)
    return CalibrationResult(est.politeness_, est.lc_threshold_, est.b_safe_, est.best_score_, len(y), n_changes)
