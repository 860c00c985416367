import pytest

from switchctl.fields import time_grid
from switchctl.merton import solve_equilibrium_ode
from switchctl.models import (merton_model, merton_spec, toy_anchored_model)


@pytest.fixture(scope="session")
def mt_ti():
    """Time-inconsistent worked example: model + phi solutions on a shared grid."""
    model = merton_model(merton_spec(True))
    times = time_grid(0.0, model.T, 160)
    phi = solve_equilibrium_ode(model.spec, times, tol=1e-13)
    return {"model": model, "times": times, "phi": phi}


@pytest.fixture(scope="session")
def mt_tc():
    model = merton_model(merton_spec(False))
    times = time_grid(0.0, model.T, 160)
    phi = solve_equilibrium_ode(model.spec, times, tol=1e-13)
    return {"model": model, "times": times, "phi": phi}


@pytest.fixture(scope="session")
def toy_ti():
    return toy_anchored_model(True)


@pytest.fixture(scope="session")
def toy_tc():
    return toy_anchored_model(False)
