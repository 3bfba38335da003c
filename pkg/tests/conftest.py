import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from lbsc.platoon_plant import FleetState  # noqa: E402
from lbsc.vehicle_dynamics import CarParams  # noqa: E402
from utils.loader import DATA_DIR, load_scenario  # noqa: E402


@pytest.fixture
def table_one_car() -> CarParams:
    return CarParams()


@pytest.fixture
def crude_car() -> CarParams:
    return CarParams.crude_nominal()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def cruise_state() -> FleetState:
    """All cars at 20 m/s with 60 m gaps."""
    return FleetState.initial(velocities=20.0)


@pytest.fixture(scope="session")
def mismatch_scenario():
    return load_scenario()


@pytest.fixture(scope="session")
def zero_mismatch_scenario():
    return load_scenario(str(Path(DATA_DIR) / "ccc_zero_mismatch.yaml"))
