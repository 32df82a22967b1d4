from __future__ import annotations

import copy
import math
from pathlib import Path

import numpy as np
import pytest

from catdrive.scenario import scenario_from_dict

FIXTURES = Path(__file__).parent / "fixtures"


def straight_states(x0, y0, heading, speed, steps=91, dt=0.1):
    t = np.arange(steps) * dt
    return [
        {"x": x0 + math.cos(heading) * speed * ti, "y": y0 + math.sin(heading) * speed * ti,
         "heading": heading, "speed": speed, "valid": True}
        for ti in t
    ]


def minimal_doc(steps: int = 91) -> dict:
    """One straight 200 m lane; ego at 10 m/s and an adversary 30 m ahead at 10 m/s."""
    return {
        "dt": 0.1,
        "horizon_steps": 91,
        "history_steps": 11,
        "map": {
            "lanes": [{"id": "main", "lane_width": 3.5, "successors": [],
                       "centerline": [[0.0, 0.0], [100.0, 0.0], [200.0, 0.0]]}],
            "boundaries": [[[0.0, 1.75], [200.0, 1.75]], [[0.0, -1.75], [200.0, -1.75]]],
        },
        "tracks": [
            {"id": "ego", "length": 4.5, "width": 1.8, "states": straight_states(5.0, 0.0, 0.0, 10.0, steps)},
            {"id": "adv", "length": 4.5, "width": 1.8, "states": straight_states(35.0, 0.0, 0.0, 10.0, steps)},
        ],
        "ego_id": "ego",
        "adversary_id": "adv",
        "ego_route": ["main"],
        "destination": [95.0, 0.0],
    }


@pytest.fixture
def doc():
    return copy.deepcopy(minimal_doc())


@pytest.fixture
def scenario():
    return scenario_from_dict(minimal_doc())


@pytest.fixture(scope="session")
def small_corpus():
    from catdrive.forge import forge_corpus

    return forge_corpus(10, 0.8, seed=3)
