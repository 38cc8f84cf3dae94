import numpy as np
import pytest

from cardiotwin.model import PatientParams
from cardiotwin.solver import simulate_cycles


@pytest.fixture(scope="session")
def ref_params():
    return PatientParams.reference()


@pytest.fixture(scope="session")
def ref_traj(ref_params):
    return simulate_cycles(ref_params, n_cycles=3, steps_per_cycle=2000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_ctx():
    """Trained surrogate and backbone shared by the pipeline and acceptance tests."""
    from cardiotwin.acceptance import AcceptanceContext

    return AcceptanceContext()
