"""Trajectory storage, scenario extraction and lane-change calibration."""

from .calibration import (
    CalibrationResult,
    LaneChangeCalibrator,
    calibrate_lane_change,
    decision_points,
    predict_decisions,
)
from .events import (
    ScenarioRecord,
    Thresholds,
    extract_events,
    read_scenarios,
    ttc_table,
    write_scenarios,
)
from .trajectories import TRAJ_COLUMNS, TrajectoryStore, config_hash

__all__ = [
    "CalibrationResult",
    "LaneChangeCalibrator",
    "ScenarioRecord",
    "TRAJ_COLUMNS",
    "Thresholds",
    "TrajectoryStore",
    "calibrate_lane_change",
    "config_hash",
    "decision_points",
    "extract_events",
    "predict_decisions",
    "read_scenarios",
    "ttc_table",
    "write_scenarios",
]
