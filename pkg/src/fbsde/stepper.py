"""Backward time stepping on cell fields.

Three schemes share the transition matrix ``P`` and the cell-averaged driver
``gbar_j(t, y, z) = (1/h) int_{I_j} g(t, s, y, z) ds``:

* explicit:  ``v^k = P (v^{k+1} - dt * gbar(t_{k+1}, v^{k+1}))``
  (drivers without ``z``),
* hybrid:    ``w^k = sigma D v^{k+1}`` then ``v^k + dt gbar(t_k, v^k, w^k) = P v^{k+1}``,
* implicit:  as hybrid but with ``w^k = sigma D v^k``; the coupling is
  resolved by a Picard loop that alternates the gradient and the per-cell solve.

``D`` is a central (or upwind) difference with one-sided differences in the
two wall cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np

from .errors import (ConfigurationError, EvaluationError, NonConvergenceError,
                     SingularJacobianError, StepError, UsageError)
from .grid import (DEFAULT_QUAD_ORDER, CellField, SpatialGrid, TimeGrid, interpolate,
                   project)
from .semigroup import TransitionMatrix

logger = logging.getLogger(__name__)

Algorithm = Literal["explicit", "hybrid", "implicit"]


@dataclass(frozen=True)
class Driver:
    """Driver ``g(t, x, y, z)`` of the backward equation, vectorised over arrays.

    ``gy`` is the partial derivative in ``y`` (same signature); when absent
    Newton falls back to a central finite difference.  ``lipschitz_L`` is a
    global Lipschitz bound in ``y`` and ``monotone_gamma`` a constant with
    ``(g(y) - g(w)) (y - w) >= gamma |y - w|^2``.
    """

    g: Callable
    depends_on_z: bool = True
    depends_on_x: bool = True
    gy: Optional[Callable] = None
    lipschitz_L: Optional[float] = None
    monotone_gamma: Optional[float] = None

    def __call__(self, t, x, y, z):
        return self.g(t, x, y, z)


def zero_driver() -> Driver:
    return Driver(lambda t, x, y, z: np.zeros(np.broadcast(x, y).shape),
                  depends_on_z=False, depends_on_x=False,
                  gy=lambda t, x, y, z: np.zeros(np.broadcast(x, y).shape), lipschitz_L=0.0,
                  monotone_gamma=0.0)


@dataclass(frozen=True)
class SolverConfig:
    algorithm: Algorithm = "hybrid"
    inner: Literal["auto", "fixed_point", "newton"] = "auto"
    tol: float = 1e-12
    max_iter: int = 100
    gradient_scheme: Literal["central", "upwind"] = "central"
    outer_tol: float = 1e-10
    outer_max_iter: int = 50
    quad_order: int = DEFAULT_QUAD_ORDER

    def __post_init__(self):
        if self.algorithm not in ("explicit", "hybrid", "implicit"):
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.inner not in ("auto", "fixed_point", "newton"):
            raise ConfigurationError(f"unknown inner solver {self.inner!r}")
        if self.gradient_scheme not in ("central", "upwind"):
            raise ConfigurationError(f"unknown gradient scheme {self.gradient_scheme!r}")
        if not self.tol > 0 or not self.outer_tol > 0:
            raise ConfigurationError("tolerances must be positive")
        if self.max_iter < 1 or self.outer_max_iter < 1:
            raise ConfigurationError("iteration limits must be >= 1")

    def inner_method(self, driver: Driver, dt: float) -> str:
        if self.inner != "auto":
            return self.inner
        if driver.lipschitz_L is not None and driver.lipschitz_L * dt < 0.5:
            return "fixed_point"
        return "newton"


@dataclass(eq=False)
class SolutionSurface:
    """All time levels of a backward sweep.

    ``v[k]`` and ``w[k]`` are arrays of cell values at ``t_k``; row ``N`` is
    the terminal level.  ``iterations[k]`` is the largest inner iteration
    count of the step producing level ``k`` and ``outer_iterations[k]`` the
    Picard count (1 for explicit and hybrid steps).
    """

    v: np.ndarray
    w: np.ndarray
    grid: SpatialGrid
    tgrid: TimeGrid
    x0: float
    y0: float
    z0: float
    iterations: np.ndarray
    outer_iterations: np.ndarray
    algorithm: str = "hybrid"

    def v_field(self, k: int) -> CellField:
        return CellField(self.v[k], self.grid)

    def w_field(self, k: int) -> CellField:
        return CellField(self.w[k], self.grid)


# driver cell averages ----------------------------------------------------

class _CellDriver:
    """Cell-averaged driver and its ``y`` derivative on a fixed grid."""

    def __init__(self, driver: Driver, grid: SpatialGrid, quad_order: int = DEFAULT_QUAD_ORDER):
        self.driver = driver
        self.grid = grid
        if driver.depends_on_x:
            self.nodes, self.weights = grid.quadrature_nodes(quad_order)
        else:
            self.nodes, self.weights = grid.centers, None

    def _avg(self, fn, t, y, z):
        if self.weights is None:
            out = np.asarray(fn(t, self.nodes, y, z), dtype=float)
            return np.broadcast_to(out, y.shape)
        vals = fn(t, self.nodes, y[:, None], z[:, None])
        return np.broadcast_to(vals, self.nodes.shape) @ self.weights

    def value(self, t, y, z):
        out = self._avg(self.driver.g, t, y, z)
        if not np.all(np.isfinite(out)):
            cell = int(np.flatnonzero(~np.isfinite(out))[0])
            raise StepError(f"non-finite driver value at t={t}, cell {cell}", t=t, cell=cell)
        return out

    def dy(self, t, y, z):
        if self.driver.gy is not None:
            return self._avg(self.driver.gy, t, y, z)
        eps = 1e-6 * np.maximum(1.0, np.abs(y))
        return (self._avg(self.driver.g, t, y + eps, z)
                - self._avg(self.driver.g, t, y - eps, z)) / (2 * eps)


def _solve_cells(cd: _CellDriver, t: float, dt: float, rhs: np.ndarray, z: np.ndarray,
                 method: str, tol: float, max_iter: int, y_init: np.ndarray | None = None):
    """Solve ``y_j + dt * gbar_j(t, y_j, z_j) = rhs_j`` cell by cell (vectorised)."""
    y = rhs.copy() if y_init is None else y_init.copy()
    for it in range(1, max_iter + 1):
        if method == "fixed_point":
            y_new = rhs - dt * cd.value(t, y, z)
        else:
            jac = 1.0 + dt * cd.dy(t, y, z)
            small = np.abs(jac) < 1e-12
            if small.any():
                cell = int(np.flatnonzero(small)[0])
                raise SingularJacobianError(
                    f"Newton derivative 1 + dt*g_y = {jac[cell]!r} at t={t}, cell {cell}",
                    t=t, cell=cell)
            y_new = y - (y + dt * cd.value(t, y, z) - rhs) / jac
        delta = np.abs(y_new - y)
        y = y_new
        if not np.all(np.isfinite(y)):
            cell = int(np.flatnonzero(~np.isfinite(y))[0])
            raise StepError(f"inner iteration diverged at t={t}, cell {cell}", t=t, cell=cell)
        if delta.max() <= tol:
            return y, it
    cell = int(np.argmax(delta))
    residual = float(np.abs(y + dt * cd.value(t, y, z) - rhs)[cell])
    raise NonConvergenceError(
        f"{method} did not converge in {max_iter} iterations at t={t}: "
        f"cell {cell}, update {delta[cell]:.3e}, residual {residual:.3e}",
        t=t, cell=cell, residual=residual)


# gradients ---------------------------------------------------------------

def _gradient(u: np.ndarray, h: float, sigma: np.ndarray, periodic: bool,
              scheme: str = "central", drift: np.ndarray | None = None) -> np.ndarray:
    du = np.empty_like(u)
    if periodic:
        fwd = (np.roll(u, -1) - u) / h
        bwd = (u - np.roll(u, 1)) / h
        if scheme == "central":
            du = (np.roll(u, -1) - np.roll(u, 1)) / (2 * h)
        else:
            du = np.where(drift >= 0, fwd, bwd)
        return sigma * du
    if scheme == "central":
        du[1:-1] = (u[2:] - u[:-2]) / (2 * h)
    else:
        fwd = (u[2:] - u[1:-1]) / h
        bwd = (u[1:-1] - u[:-2]) / h
        du[1:-1] = np.where(drift[1:-1] >= 0, fwd, bwd)
    du[0] = (u[1] - u[0]) / h
    du[-1] = (u[-1] - u[-2]) / h
    return sigma * du


def gradient(field: CellField, sigma_at_centers: CellField | np.ndarray,
             scheme: str = "central", drift_at_centers: np.ndarray | None = None) -> CellField:
    """``sigma * du/dx`` at cell centres by finite differences.

    ``upwind`` picks the forward difference where the drift is non-negative
    and the backward one elsewhere; it needs ``drift_at_centers``.
    """
    grid = field.grid
    if grid.n_cells < 3:
        raise UsageError("gradient needs at least 3 cells")
    sigma = sigma_at_centers.values if isinstance(sigma_at_centers, CellField) else \
        np.broadcast_to(np.asarray(sigma_at_centers, dtype=float), (grid.n_cells,))
    if scheme == "upwind" and drift_at_centers is None:
        raise UsageError("upwind gradient needs the drift at cell centres")
    drift = None if drift_at_centers is None else \
        np.broadcast_to(np.asarray(drift_at_centers, dtype=float), (grid.n_cells,))
    return CellField(_gradient(field.values, grid.h, sigma, grid.periodic, scheme, drift), grid)


# single steps ------------------------------------------------------------

def terminal_coefficients(phi: Callable, grid: SpatialGrid,
                          quad_order: int = DEFAULT_QUAD_ORDER) -> CellField:
    """Cell averages of the payoff, split at ``phi.kinks`` when present."""
    return project(phi, grid, quad_order, kinks=getattr(phi, "kinks", ()))


def _check_same_grid(P: TransitionMatrix, f: CellField):
    if f.grid.n_cells != P.n:
        raise UsageError(f"field with {f.grid.n_cells} cells against {P.n}x{P.n} matrix")


def _explicit(P, cd, v_next, t_next, dt):
    g = cd.value(t_next, v_next, np.zeros_like(v_next))
    return P.matrix @ (v_next - dt * g)


def step_explicit(P: TransitionMatrix, v_next: CellField, driver: Driver, t_next: float,
                  dt: float, quad_order: int = DEFAULT_QUAD_ORDER) -> CellField:
    if driver.depends_on_z:
        raise UsageError("the explicit scheme needs a driver independent of z")
    _check_same_grid(P, v_next)
    cd = _CellDriver(driver, v_next.grid, quad_order)
    return CellField(_explicit(P, cd, v_next.values, t_next, dt), v_next.grid)


def _sigma_arg(sigma, grid):
    if sigma is None:
        return np.ones(grid.n_cells)
    if isinstance(sigma, CellField):
        return sigma.values
    return np.broadcast_to(np.asarray(sigma, dtype=float), (grid.n_cells,))


def step_hybrid(P: TransitionMatrix, v_next: CellField, driver: Driver, t_k: float, dt: float,
                cfg: SolverConfig = SolverConfig(), sigma_at_centers=None,
                drift_at_centers=None) -> tuple[CellField, CellField]:
    """One hybrid step; returns ``(v^k, w^k)`` with ``w^k`` built from ``v^{k+1}``."""
    _check_same_grid(P, v_next)
    grid = v_next.grid
    cd = _CellDriver(driver, grid, cfg.quad_order)
    sigma = _sigma_arg(sigma_at_centers, grid)
    v, w, _ = _hybrid(P, cd, v_next.values, t_k, dt, cfg, sigma, drift_at_centers)
    return CellField(v, grid), CellField(w, grid)


def _hybrid(P, cd, v_next, t_k, dt, cfg, sigma, drift):
    grid = cd.grid
    w = _gradient(v_next, grid.h, sigma, grid.periodic, cfg.gradient_scheme, drift)
    rhs = P.matrix @ v_next
    method = cfg.inner_method(cd.driver, dt)
    v, iters = _solve_cells(cd, t_k, dt, rhs, w, method, cfg.tol, cfg.max_iter)
    return v, w, iters


def step_implicit(P: TransitionMatrix, v_next: CellField, driver: Driver, t_k: float, dt: float,
                  cfg: SolverConfig = SolverConfig(), sigma_at_centers=None,
                  drift_at_centers=None) -> tuple[CellField, CellField]:
    """One fully implicit step; returns ``(v^k, w^k)`` with ``w^k = sigma D v^k``."""
    _check_same_grid(P, v_next)
    grid = v_next.grid
    cd = _CellDriver(driver, grid, cfg.quad_order)
    sigma = _sigma_arg(sigma_at_centers, grid)
    v, w, _, _ = _implicit(P, cd, v_next.values, t_k, dt, cfg, sigma, drift_at_centers)
    return CellField(v, grid), CellField(w, grid)


def _implicit(P, cd, v_next, t_k, dt, cfg, sigma, drift):
    grid = cd.grid
    rhs = P.matrix @ v_next
    method = cfg.inner_method(cd.driver, dt)
    grad = lambda u: _gradient(u, grid.h, sigma, grid.periodic, cfg.gradient_scheme, drift)
    if not cd.driver.depends_on_z:
        v, iters = _solve_cells(cd, t_k, dt, rhs, np.zeros_like(rhs), method, cfg.tol,
                                cfg.max_iter)
        return v, grad(v), iters, 1
    v = rhs.copy()
    max_iters = 0
    for outer in range(1, cfg.outer_max_iter + 1):
        w = grad(v)
        v_new, iters = _solve_cells(cd, t_k, dt, rhs, w, method, cfg.tol, cfg.max_iter, y_init=v)
        max_iters = max(max_iters, iters)
        change = np.abs(v_new - v)
        v = v_new
        if change.max() <= cfg.outer_tol:
            return v, grad(v), max_iters, outer
    cell = int(np.argmax(change))
    raise NonConvergenceError(
        f"Picard loop did not converge in {cfg.outer_max_iter} iterations at t={t_k}: "
        f"cell {cell}, change {change[cell]:.3e}", t=t_k, cell=cell, residual=float(change[cell]))


# full sweep --------------------------------------------------------------

def solve_backward(problem, sgrid: SpatialGrid, tgrid: TimeGrid, P: TransitionMatrix,
                   cfg: SolverConfig = SolverConfig()) -> SolutionSurface:
    """Sweep ``k = N-1, ..., 0`` with the configured scheme.

    ``problem`` needs ``kernel``, ``driver``, ``payoff`` and ``x0``
    attributes (see :class:`fbsde.problems.ProblemSpec`).
    """
    driver: Driver = problem.driver
    if cfg.algorithm == "explicit" and driver.depends_on_z:
        raise ConfigurationError("the explicit scheme needs a driver independent of z")
    if P.n != sgrid.n_cells:
        raise UsageError(f"matrix has {P.n} rows, grid has {sgrid.n_cells} cells")
    if abs(P.dt - tgrid.dt) > 1e-12 * tgrid.dt:
        raise UsageError(f"matrix built for dt={P.dt}, time grid has dt={tgrid.dt}")

    n, N, dt = sgrid.n_cells, tgrid.n_steps, tgrid.dt
    centers = sgrid.centers
    sigma = np.broadcast_to(np.asarray(problem.kernel.sigma(centers), dtype=float), (n,))
    drift = np.broadcast_to(np.asarray(problem.kernel.drift(centers), dtype=float), (n,))
    grad = lambda u: _gradient(u, sgrid.h, sigma, sgrid.periodic, cfg.gradient_scheme, drift)
    cd = _CellDriver(driver, sgrid, cfg.quad_order)

    v = np.empty((N + 1, n))
    w = np.empty((N + 1, n))
    iters = np.zeros(N + 1, dtype=np.int64)
    outer = np.zeros(N + 1, dtype=np.int64)
    v[N] = terminal_coefficients(problem.payoff, sgrid, cfg.quad_order).values
    w[N] = grad(v[N])

    for k in range(N - 1, -1, -1):
        try:
            if cfg.algorithm == "explicit":
                v[k] = _explicit(P, cd, v[k + 1], tgrid.t(k + 1), dt)
                w[k] = grad(v[k + 1])
                outer[k] = 1
            elif cfg.algorithm == "hybrid":
                v[k], w[k], iters[k] = _hybrid(P, cd, v[k + 1], tgrid.t(k), dt, cfg, sigma, drift)
                outer[k] = 1
            else:
                v[k], w[k], iters[k], outer[k] = _implicit(P, cd, v[k + 1], tgrid.t(k), dt, cfg,
                                                           sigma, drift)
        except StepError as exc:
            exc.k = k
            exc.args = (f"step k={k}: {exc.args[0]}",)
            raise
        if not np.all(np.isfinite(v[k])):
            cell = int(np.flatnonzero(~np.isfinite(v[k]))[0])
            raise StepError(f"step k={k}: non-finite value in cell {cell}", k=k,
                            t=tgrid.t(k), cell=cell)

    y0 = interpolate(CellField(v[0], sgrid), problem.x0)
    z0 = interpolate(CellField(w[0], sgrid), problem.x0)
    logger.debug("solved %s on %d cells x %d steps: y0=%r z0=%r", cfg.algorithm, n, N, y0, z0)
    return SolutionSurface(v, w, sgrid, tgrid, float(problem.x0), y0, z0, iters, outer,
                           cfg.algorithm)


# standalone splitting operators ------------------------------------------

def t_operator_explicit(dt: float, t: float, field: CellField, driver: Driver,
                        quad_order: int = DEFAULT_QUAD_ORDER) -> CellField:
    """``v - dt * g(t, ., v)`` cell by cell; no transport."""
    if driver.depends_on_z:
        raise UsageError("explicit T operator needs a driver independent of z")
    cd = _CellDriver(driver, field.grid, quad_order)
    u = field.values
    return CellField(u - dt * cd.value(t, u, np.zeros_like(u)), field.grid)


def t_operator_implicit(dt: float, t: float, field: CellField, driver: Driver,
                        cfg: SolverConfig = SolverConfig()) -> CellField:
    """Solve ``T + dt * g(t, ., T) = v`` cell by cell."""
    if driver.depends_on_z:
        raise UsageError("implicit T operator needs a driver independent of z")
    cd = _CellDriver(driver, field.grid, cfg.quad_order)
    u = field.values
    if dt == 0:
        return CellField(u, field.grid)
    y, _ = _solve_cells(cd, t, dt, u, np.zeros_like(u), cfg.inner_method(driver, dt),
                        cfg.tol, cfg.max_iter)
    return CellField(y, field.grid)
