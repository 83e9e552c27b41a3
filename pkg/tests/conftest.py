import numpy as np
import pytest

from dtse.arz import ModelParams
from dtse.ground_truth import ScenarioSpec, aggregate, run_microsim

PAPER_PARAMS = ModelParams(
    v_free=100.0 / 3.6, rho_jam=0.25, gamma=1.25, tau=1.0,
    n_cells=25, dt=1.0, dh=100.0,
)
DEFAULT_SEED = 2


@pytest.fixture(scope="session")
def paper_traj():
    """The default-config scenario run, shared across test modules."""
    return run_microsim(ScenarioSpec(seed=DEFAULT_SEED))


@pytest.fixture(scope="session")
def paper_fields(paper_traj):
    return aggregate(paper_traj, PAPER_PARAMS)
