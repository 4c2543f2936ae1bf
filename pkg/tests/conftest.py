import numpy as np
import pytest

from degen_rwre import EdgeTrajectory, EnvironmentWindow
from degen_rwre.percolation import Exponential, InterarrivalModel, generate_environment


def constant_env(value=1.0, L=8, period=1.0):
    return EnvironmentWindow.constant(value, 0, L, 0.0, period, periodic=True, time_period=period)


def alternating_env(L=8, seed=3):
    """deterministic(1,1) percolation, periodic in space (L) and time (2)."""
    model = InterarrivalModel.deterministic(1.0, 1.0)
    return generate_environment(model, L, (0.0, 2.0), periodic=True, seed=seed, time_period=2.0)


def percolation_env(L=6, seed=5, period=6.0):
    """Periodized exponential(1)/exponential(1) sample: genuinely random phases."""
    model = InterarrivalModel.renewal(Exponential(1.0), Exponential(1.0))
    return generate_environment(model, L, (0.0, period), periodic=True, seed=seed,
                                time_period=period)


def uniform_edges(traj, L, x_min=0, periodic=True, time_period=None):
    return EnvironmentWindow(x_min, x_min + L, traj.t_min, traj.t_max, [traj] * L, periodic,
                             time_period)


@pytest.fixture(scope="session")
def env_const():
    return constant_env()


@pytest.fixture(scope="session")
def env_alt():
    return alternating_env()


@pytest.fixture(scope="session")
def env_perc():
    return percolation_env()


@pytest.fixture(scope="session")
def battery(env_const, env_alt, env_perc):
    return {"constant": env_const, "alternating": env_alt, "percolation": env_perc}


@pytest.fixture
def off_on_edge():
    """OFF on [0,2), ON on [2,3), OFF on [3,5)."""
    return EdgeTrajectory.from_pieces([0.0, 2.0, 3.0, 5.0], [0.0, 1.0, 0.0])


def rng(seed=0):
    return np.random.default_rng(seed)
