"""Synthetic two-lane highway records for extraction and calibration tests."""

from dataclasses import replace

from corridor_twin._rng import Streams
from corridor_twin.store import TrajectoryStore
from corridor_twin.world.corridor import build_corridor
from corridor_twin.world.sim import DEFAULT_CLASS_PROFILES, ClassProfile, World, demand_spawn, step_world, try_spawn

HIGHWAY = {"length": 1500, "lanes_per_direction": 2,
           "segments": [{"start": 0, "end": 1500, "kind": "highway", "speed_limit": 33.33}]}


def profiles_with(**changes):
    return {k: ClassProfile(replace(v.params, **changes), v.v0_cap) for k, v in DEFAULT_CLASS_PROFILES.items()}


def highway_record(seed, duration=300.0, rate=0.6, mix=None, **driver):
    """Simulate the highway and record ground truth; returns (store, world, corridor, profiles)."""
    corridor = build_corridor(HIGHWAY)
    profiles = profiles_with(**driver)
    world = World(corridor, class_profiles=profiles)
    streams = Streams(seed)
    store = TrajectoryStore()
    for _ in range(int(round(duration / world.dt))):
        demand_spawn(world, rate, mix or {"car": 0.7, "truck": 0.3}, streams("demand"))
        while world.entry_queue:
            if try_spawn(world, world.entry_queue[0][1]) is None:
                break
            world.entry_queue.popleft()
        store.record_world(world)
        step_world(world)
    store.record_world(world)
    return store, world, corridor, profiles
