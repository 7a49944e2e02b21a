import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def desk():
    from covplan.world import load_scenario
    return load_scenario(ROOT / "scenarios" / "desk.json")


@pytest.fixture(scope="session")
def desk_table(desk):
    from covplan.raytrace import learn_table
    return learn_table(desk)
