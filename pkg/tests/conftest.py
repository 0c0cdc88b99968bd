import numpy as np
import pytest

from corridor_twin.presets import preset
from corridor_twin.world import build_corridor


@pytest.fixture
def straight():
    """Signal-free one-lane 1 km corridor at 50 km/h."""
    return build_corridor({"length": 1000.0, "lanes_per_direction": 1,
                           "segments": [{"start": 0.0, "end": 1000.0, "kind": "urban", "speed_limit": 13.89}]})


@pytest.fixture
def two_lane():
    return build_corridor({"length": 2000.0, "lanes_per_direction": 2,
                           "segments": [{"start": 0.0, "end": 2000.0, "kind": "rural", "speed_limit": 19.44}]})


@pytest.fixture
def urban_map():
    return build_corridor(preset("urban"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, one line per criterion, repeated in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
