"""Bundled scenario presets and scenario-config loading.

A scenario config is a plain mapping; presets are the same mappings shipped
with the package. YAML or JSON files with the same keys can be loaded with
:func:`load_scenario` and are merged over the preset named in ``preset``.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError

FIXED_CYCLE = [["GREEN", 30.0], ["AMBER", 3.0], ["RED", 27.0]]


def _landmarks(stop_s: float) -> list[dict]:
    out = []
    for i in range(9):
        x = stop_s - 60.0 + 15.0 * i
        out.append({"id": f"L{i:02d}", "x": x, "y": -2.0 if i % 2 == 0 else -3.5})
    for i in range(5):
        out.append({"id": f"R{i:02d}", "x": stop_s - 52.5 + 30.0 * i, "y": 9.0})
    return out


URBAN = {
    "name": "urban",
    "corridor": {
        "length": 1000.0,
        "lanes_per_direction": 1,
        "segments": [{"start": 0.0, "end": 1000.0, "kind": "urban", "speed_limit": 13.89}],
        "signals": [
            {"id": "S1", "s": 400.0, "plan": {"type": "fixed", "cycle": FIXED_CYCLE, "offset": 0.0,
                                               "priority_max_wait": 10.0}},
            {"id": "S2", "s": 750.0, "plan": {"type": "fixed", "cycle": FIXED_CYCLE, "offset": 10.0,
                                               "priority_max_wait": 10.0}},
        ],
        "bus_stops": [{"s": 600.0, "lateral_offset": 0.0}],
        "landmarks": _landmarks(600.0),
    },
    "demand": {"rate": 1.0 / 6.0, "mix": {"car": 0.9, "bus": 0.1}},
    "stations": {"kind": "optical", "spacing": 90.0, "condition": "day", "options": {}},
    "network": {"uplink": "uplink4g", "downlink": "cv2x"},
    "fusion": {},
    "copilot": {"penetration": 0.0, "params": {}},
    "priority": {"enabled": True, "request_distance": 80.0},
    "shocks": {"count": 0, "magnitude": 5.0},
    "mover": {"enabled": True, "actors": "both"},
    "perception": True,
    "duration": 600.0,
}

RURAL = {
    "name": "rural",
    "corridor": {
        "length": 2000.0,
        "lanes_per_direction": 2,
        "segments": [{"start": 0.0, "end": 2000.0, "kind": "rural", "speed_limit": 19.44}],
        "signals": [
            {"id": "S1", "s": 800.0, "plan": {"type": "actuated", "min_green": 10.0, "max_green": 45.0,
                                               "gap_out": 3.0, "red": 25.0}},
            {"id": "S2", "s": 1500.0, "plan": {"type": "actuated", "min_green": 10.0, "max_green": 45.0,
                                                "gap_out": 3.0, "red": 25.0}},
        ],
    },
    "demand": {"rate": 0.3, "mix": {"car": 0.85, "truck": 0.15}},
    "stations": {"kind": "optical", "spacing": 100.0, "condition": "day", "options": {}},
    "network": {"uplink": "uplink4g", "downlink": "itsg5"},
    "fusion": {},
    "copilot": {"penetration": 0.0, "params": {}},
    "priority": {"enabled": False},
    "shocks": {"count": 0, "magnitude": 5.0},
    "mover": {"enabled": False},
    "perception": True,
    "duration": 600.0,
}

HIGHWAY = {
    "name": "highway",
    "corridor": {
        "length": 2000.0,
        "lanes_per_direction": 3,
        "segments": [{"start": 0.0, "end": 2000.0, "kind": "highway", "speed_limit": 33.33}],
    },
    "demand": {"rate": 0.8, "mix": {"car": 0.8, "truck": 0.2}},
    "stations": {"kind": "ir", "spacing": 100.0, "condition": "night", "options": {}},
    "network": {"uplink": "uplink4g", "downlink": "cv2x"},
    "fusion": {},
    "copilot": {"penetration": 0.0, "params": {}},
    "priority": {"enabled": False},
    "shocks": {"count": 0, "magnitude": 5.0},
    "mover": {"enabled": False},
    "perception": True,
    "duration": 600.0,
}

PRESETS: dict[str, dict] = {"urban": URBAN, "rural": RURAL, "highway": HIGHWAY}


def preset(name: str) -> dict:
    """Deep copy of a bundled preset."""
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_scenario(source: Any) -> dict:
    """Scenario mapping from a preset name, a YAML/JSON path or a mapping.

    A file or mapping may name a ``preset`` to start from; its other keys
    override the preset's. Without a preset, sections other than the
    corridor default to the urban preset's.
    """
    if isinstance(source, Mapping):
        raw = dict(source)
    elif isinstance(source, str) and source in PRESETS:
        return preset(source)
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"no preset or config file named {str(source)!r}")
        text = path.read_text()
        try:
            raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path} does not hold a mapping")
    base_name = raw.pop("preset", None)
    if base_name is not None:
        return deep_merge(preset(str(base_name)), raw)
    if "corridor" not in raw:
        raise ConfigError("scenario config needs a corridor section or a preset")
    # unspecified sections fall back to the urban defaults; the corridor is taken as given
    out = deep_merge(preset("urban"), {k: v for k, v in raw.items() if k != "corridor"})
    out["corridor"] = copy.deepcopy(raw["corridor"])
    out["name"] = raw.get("name", "custom")
    if "mover" not in raw:
        out["mover"] = {"enabled": False}
    return out
