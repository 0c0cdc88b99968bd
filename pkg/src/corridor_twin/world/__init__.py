"""Ground-truth corridor world: geometry, driver behaviour, signals, stepping."""

from .behavior import (
    B_EMERGENCY,
    CLASS_DIMENSIONS,
    DriverParams,
    LaneDecision,
    LaneNeighbors,
    LateralTrajectory,
    Neighbors,
    VehicleState,
    equilibrium_gap,
    idm_accel,
    lane_change_execute,
    mobil_decide,
    quintic_blend,
)
from .corridor import BusStop, CorridorMap, Landmark, Segment, build_corridor
from .signals import (
    ActuatedController,
    ActuatedPlan,
    FixedController,
    FixedPlan,
    SignalHead,
    SignalState,
    SpatForecast,
    SpatPhase,
    fixed_state,
    make_controller,
    signal_update,
)
from .sim import (
    DEFAULT_CLASS_PROFILES,
    DT,
    ClassProfile,
    ManeuverRecord,
    World,
    demand_spawn,
    neighbors_of,
    step_world,
)
