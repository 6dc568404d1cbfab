import numpy as np
import pytest

from fbsde import BrownianKernel, ProblemSpec, build_spatial_grid
from fbsde.problems import Payoff
from fbsde.stepper import Driver


def linear_driver(lam: float) -> Driver:
    return Driver(lambda t, x, y, z: lam * y + 0.0 * x, depends_on_z=False, depends_on_x=False,
                  gy=lambda t, x, y, z: lam + 0.0 * (x + y), lipschitz_L=abs(lam),
                  monotone_gamma=lam)


def toy_problem(driver: Driver, payoff=lambda x: np.cos(x), lo=-1.0, hi=1.0, x0=0.1,
                kinks=(), kernel=None, horizon=1.0) -> ProblemSpec:
    """Small Brownian problem used by unit tests that need a ``ProblemSpec``."""
    return ProblemSpec("toy", kernel or BrownianKernel(0.0, 1.0), driver, Payoff(payoff, kinks),
                       horizon, lo, hi, x0)


@pytest.fixture
def grid800():
    return build_spatial_grid(-4.0, 4.0, 800)


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)
