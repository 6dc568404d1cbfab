"""Benchmark FBSDEs with their payoffs and analytic solutions.

Names accepted by :func:`get_problem`: ``example1``, ``straddle``, ``call``,
``call_combination`` and ``example3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError
from .semigroup import BrownianKernel, GeometricKernel, TransitionKernel
from .stepper import Driver

HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class Payoff:
    """Terminal condition with the points where it is not smooth."""

    fn: Callable[[np.ndarray], np.ndarray]
    kinks: tuple[float, ...] = ()

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class MarketParams:
    mu: float
    sigma: float
    r: float
    R: float
    T: float
    x0: float
    K: float = 1.0
    K1: float = 0.95
    K2: float = 1.05

    def __post_init__(self):
        if not (self.sigma > 0 and self.T > 0 and self.x0 > 0):
            raise ConfigurationError("need sigma > 0, T > 0 and x0 > 0")


STRADDLE_PARAMS = MarketParams(mu=0.05, sigma=0.2, r=0.01, R=0.01, T=2.0, x0=1.0, K=1.0)
CALL_PARAMS = MarketParams(mu=0.06, sigma=0.2, r=0.04, R=0.06, T=2.0, x0=1.0, K=1.0)
# Short-dated combination whose price is about 0.0295.
CALL_COMBINATION_PARAMS = MarketParams(mu=0.05, sigma=0.2, r=0.01, R=0.06, T=0.25, x0=1.0,
                                       K1=0.95, K2=1.05)


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    kernel: TransitionKernel
    driver: Driver
    payoff: Payoff
    horizon: float
    lo: float
    hi: float
    x0: float
    periodic: bool = False
    analytic_v: Optional[Callable] = None
    analytic_vx: Optional[Callable] = None
    params: Optional[MarketParams] = None
    default_algorithm: str = "hybrid"
    reference_y0: Optional[float] = None

    def __post_init__(self):
        if not self.lo < self.x0 < self.hi:
            raise ConfigurationError(f"x0={self.x0} outside ({self.lo}, {self.hi})")

    @property
    def has_analytic(self) -> bool:
        return self.analytic_v is not None

    def exact_y0z0(self) -> tuple[float, float]:
        if not self.has_analytic:
            raise ConfigurationError(f"problem {self.name!r} has no analytic solution")
        x = np.array(self.x0)
        y0 = float(self.analytic_v(0.0, x))
        z0 = float(self.kernel.sigma(x) * self.analytic_vx(0.0, x))
        return y0, z0

    def with_domain(self, lo: float | None = None, hi: float | None = None) -> "ProblemSpec":
        return replace(self, lo=self.lo if lo is None else float(lo),
                       hi=self.hi if hi is None else float(hi))


# Brownian examples with the periodic solution sin(pi (x + t) / 2) + 1 ----------

def _sine_v(t, x):
    return np.sin(HALF_PI * (np.asarray(x) + t)) + 1.0


def _sine_vx(t, x):
    return HALF_PI * np.cos(HALF_PI * (np.asarray(x) + t))


def _sine_payoff(T):
    return Payoff(lambda x: np.sin(HALF_PI * (x + T)) + 1.0)


def example1(T: float = 2.0, lo: float = -4.0, hi: float = 4.0) -> ProblemSpec:
    """Rational driver depending on ``z``; exact solution ``sin(pi(x+t)/2) + 1``."""
    a2 = HALF_PI ** 2

    def g(t, x, y, z):
        u = y - 1.0
        return (-a2 * u + 2.0 * z) / (u * u + (z / HALF_PI) ** 2 + 1.0)

    def gy(t, x, y, z):
        u = y - 1.0
        den = u * u + (z / HALF_PI) ** 2 + 1.0
        return (-a2 * den - (-a2 * u + 2.0 * z) * 2.0 * u) / den ** 2

    # sup |g_y| = (pi/2)^2, attained at y = 1, z = 0
    driver = Driver(g, depends_on_z=True, depends_on_x=False, gy=gy, lipschitz_L=a2)
    return ProblemSpec("example1", BrownianKernel(0.0, 1.0), driver, _sine_payoff(T), T, lo, hi,
                       0.0, periodic=is_period_multiple(lo, hi), analytic_v=_sine_v,
                       analytic_vx=_sine_vx, default_algorithm="hybrid")


def example3(T: float = 2.0, lo: float = -4.0, hi: float = 4.0) -> ProblemSpec:
    """Cubic (monotone, locally Lipschitz) driver with the same exact solution."""
    c = math.pi ** 2 / 8.0

    def g(t, x, y, z):
        return y ** 3 - c * (y - 1.0) + z - (np.sin(HALF_PI * (x + t)) + 1.0) ** 3

    def gy(t, x, y, z):
        return 3.0 * y ** 2 - c + 0.0 * x

    driver = Driver(g, depends_on_z=True, depends_on_x=True, gy=gy, monotone_gamma=-c)
    return ProblemSpec("example3", BrownianKernel(0.0, 1.0), driver, _sine_payoff(T), T, lo, hi,
                       0.0, periodic=is_period_multiple(lo, hi), analytic_v=_sine_v,
                       analytic_vx=_sine_vx, default_algorithm="hybrid")


def is_period_multiple(lo, hi, period=4.0):
    ratio = (hi - lo) / period
    return abs(ratio - round(ratio)) < 1e-12


# differential lending/borrowing rates ---------------------------------------

def normal_cdf(x):
    """Standard normal CDF (complementary error function based)."""
    return ndtr(x)


def _d1_d2(rate, sigma, T, t, x, K):
    tau = T - t
    sq = sigma * np.sqrt(tau)
    with np.errstate(divide="ignore"):
        d1 = (np.log(x / K) + (rate + 0.5 * sigma ** 2) * tau) / sq
    return d1, d1 - sq, tau


def _bs_straddle_parts(params: MarketParams, t, x):
    x = np.asarray(x, dtype=float)
    if t >= params.T:
        return np.abs(x - params.K), np.sign(x - params.K)
    d1, d2, tau = _d1_d2(params.r, params.sigma, params.T, t, x, params.K)
    n1 = 2.0 * ndtr(d1) - 1.0
    price = x * n1 - params.K * math.exp(-params.r * tau) * (2.0 * ndtr(d2) - 1.0)
    return price, n1


def _bs_call_parts(params: MarketParams, t, x, K=None):
    x = np.asarray(x, dtype=float)
    K = params.K if K is None else K
    if t >= params.T:
        return np.maximum(x - K, 0.0), (x > K).astype(float)
    d1, d2, tau = _d1_d2(params.R, params.sigma, params.T, t, x, K)
    n1 = ndtr(d1)
    return x * n1 - K * math.exp(-params.R * tau) * ndtr(d2), n1


def black_scholes_straddle(params: MarketParams, t: float, x):
    """Straddle price at lending rate ``r`` and ``Z = sigma x dV/dx``."""
    price, dx = _bs_straddle_parts(params, t, x)
    return price, params.sigma * np.asarray(x, dtype=float) * dx


def black_scholes_call(params: MarketParams, t: float, x):
    """Call price at the borrowing rate ``R`` and ``Z = sigma x dV/dx``."""
    price, dx = _bs_call_parts(params, t, x)
    return price, params.sigma * np.asarray(x, dtype=float) * dx


def differential_rates_driver(params: MarketParams) -> Driver:
    mu, sig, r, R = params.mu, params.sigma, params.r, params.R
    theta = (mu - r) / sig

    def g(t, x, y, z):
        return r * y + theta * z + (R - r) * np.minimum(y - z / sig, 0.0)

    def gy(t, x, y, z):
        return r + (R - r) * (y - z / sig < 0.0)

    return Driver(g, depends_on_z=True, depends_on_x=False, gy=gy,
                  lipschitz_L=max(abs(r), abs(R)), monotone_gamma=min(r, R))


def differential_rates(params: MarketParams, payoff_kind: str, lo: float = 0.0,
                       hi: float | None = None) -> ProblemSpec:
    """Option pricing under a borrowing rate ``R`` and a lending rate ``r``."""
    K, K1, K2 = params.K, params.K1, params.K2
    analytic_v = analytic_vx = None
    reference = None
    if payoff_kind == "straddle":
        payoff = Payoff(lambda x: np.abs(x - K), (K,))
        default_hi = 3.5
        if params.r == params.R:
            analytic_v = lambda t, x: _bs_straddle_parts(params, t, x)[0]
            analytic_vx = lambda t, x: _bs_straddle_parts(params, t, x)[1]
    elif payoff_kind == "call":
        payoff = Payoff(lambda x: np.maximum(x - K, 0.0), (K,))
        default_hi = 4.0
        analytic_v = lambda t, x: _bs_call_parts(params, t, x)[0]
        analytic_vx = lambda t, x: _bs_call_parts(params, t, x)[1]
    elif payoff_kind == "call_combination":
        payoff = Payoff(lambda x: np.maximum(x - K1, 0.0) - 2.0 * np.maximum(x - K2, 0.0),
                        (K1, K2))
        default_hi = 4.0
        reference = 0.0295
    else:
        raise ConfigurationError(f"unknown payoff kind {payoff_kind!r}")
    return ProblemSpec(payoff_kind, GeometricKernel(params.mu, params.sigma),
                       differential_rates_driver(params), payoff, params.T, lo,
                       default_hi if hi is None else hi, params.x0, analytic_v=analytic_v,
                       analytic_vx=analytic_vx, params=params, reference_y0=reference)


PROBLEM_NAMES = ("example1", "straddle", "call", "call_combination", "example3")


def get_problem(name: str) -> ProblemSpec:
    if name == "example1":
        return example1()
    if name == "example3":
        return example3()
    if name == "straddle":
        return differential_rates(STRADDLE_PARAMS, "straddle")
    if name == "call":
        return differential_rates(CALL_PARAMS, "call")
    if name == "call_combination":
        return differential_rates(CALL_COMBINATION_PARAMS, "call_combination")
    raise ConfigurationError(f"unknown problem {name!r}; expected one of {', '.join(PROBLEM_NAMES)}")
