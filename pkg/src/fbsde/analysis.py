"""Error metrics, convergence studies and an independent brute-force oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateDataError, UsageError
from .grid import (CellField, SpatialGrid, TimeGrid, build_spatial_grid, cell_averages,
                   l2_norm)
from .problems import ProblemSpec
from .semigroup import (EmpiricalKernel, TransitionMatrix, assemble_density, assemble_mc,
                        empirical, mass_deficit)
from .stepper import (SolutionSurface, SolverConfig, _CellDriver, _solve_cells,
                      solve_backward)


@dataclass
class MeshResult:
    h: float
    dt: float
    y0: float
    z0: float
    e_v: float | None
    e_y0: float | None
    e_z0: float | None
    mass_deficit_max: float
    iterations_max: int
    surface: SolutionSurface | None = field(default=None, repr=False)


@dataclass
class ErrorReport:
    rows: list[MeshResult]
    orders: dict[str, float]

    @property
    def e_v(self):
        return [r.e_v for r in self.rows]

    @property
    def e_y0(self):
        return [r.e_y0 for r in self.rows]

    @property
    def e_z0(self):
        return [r.e_z0 for r in self.rows]


@dataclass(frozen=True)
class PointErrors:
    """Relative errors at ``(0, x0)``; iterates as ``(e_y0, e_z0)``.

    When an exact value is below ``1e-14`` in magnitude the absolute error is
    reported instead and the matching ``*_absolute`` flag is set.
    """

    e_y0: float
    e_z0: float
    y0_absolute: bool = False
    z0_absolute: bool = False

    def __iter__(self):
        return iter((self.e_y0, self.e_z0))


def relative_l2_error(surface: SolutionSurface, analytic_v: Callable | None,
                      kinks: Sequence[float] = (), quad_order: int = 5) -> float:
    """``max_k |v_h^k - P_h v(t_k)| / max_k |P_h v(t_k)|`` in the discrete L2 norm."""
    if analytic_v is None:
        raise UsageError("relative_l2_error needs an analytic solution")
    grid, tgrid = surface.grid, surface.tgrid
    num = den = 0.0
    for k in range(tgrid.n_steps + 1):
        t = tgrid.t(k)
        exact = cell_averages(lambda x: analytic_v(t, x), grid, quad_order,
                              kinks if k == tgrid.n_steps else ())
        num = max(num, l2_norm(surface.v[k] - exact, grid.h))
        den = max(den, l2_norm(exact, grid.h))
    if den == 0:
        raise DegenerateDataError("analytic solution vanishes identically")
    return num / den


def point_errors(surface: SolutionSurface, problem: ProblemSpec) -> PointErrors:
    Y0, Z0 = problem.exact_y0z0()
    out = []
    for approx, exact in ((surface.y0, Y0), (surface.z0, Z0)):
        err = abs(approx - exact)
        if abs(exact) < 1e-14:
            out.append((err, True))
        else:
            out.append((err / abs(exact), False))
    return PointErrors(out[0][0], out[1][0], out[0][1], out[1][1])


def convergence_order(rows: Iterable[tuple[float, float]]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``."""
    rows = list(rows)
    if len(rows) < 2:
        raise DegenerateDataError("need at least two (h, error) rows")
    h = np.array([r[0] for r in rows], dtype=float)
    e = np.array([r[1] for r in rows], dtype=float)
    if np.any(~np.isfinite(e)) or np.any(e <= 0):
        raise DegenerateDataError("errors must be positive and finite")
    if np.any(h <= 0) or np.any(np.diff(h) >= 0):
        raise DegenerateDataError("meshes must be positive and strictly decreasing")
    slope, _ = np.polyfit(np.log(h), np.log(e), 1)
    return float(slope)


def truncation_defect(problem: ProblemSpec, sgrid: SpatialGrid, tgrid: TimeGrid,
                      P: TransitionMatrix, k: int, form: str = "explicit",
                      quad_order: int = 5) -> float:
    """L2 norm of the one-step defect of the exact solution at step ``k``.

    ``explicit``: ``P_h v(t_k) - P (P_h v(t_{k+1}) - dt gbar(t_{k+1}, .))``;
    ``implicit``: ``P_h v(t_k) - T(dt) P P_h v(t_{k+1})`` with ``T`` the
    per-cell implicit solve.  ``z`` is the projected exact ``sigma v_x``.
    """
    if not problem.has_analytic:
        raise UsageError("truncation_defect needs an analytic solution")
    if not 0 <= k < tgrid.n_steps:
        raise UsageError(f"step index {k} outside [0, {tgrid.n_steps})")
    dt = tgrid.dt
    v, vx, sig = problem.analytic_v, problem.analytic_vx, problem.kernel.sigma
    proj = lambda fn: cell_averages(fn, sgrid, quad_order)
    t0, t1 = tgrid.t(k), tgrid.t(k + 1)
    cd = _CellDriver(problem.driver, sgrid, quad_order)
    now = proj(lambda x: v(t0, x))
    nxt = proj(lambda x: v(t1, x))
    if form == "explicit":
        z1 = proj(lambda x: sig(x) * vx(t1, x))
        defect = now - P.matrix @ (nxt - dt * cd.value(t1, nxt, z1))
    elif form == "implicit":
        z0 = proj(lambda x: sig(x) * vx(t0, x))
        rhs = P.matrix @ nxt
        cfg = SolverConfig()
        y, _ = _solve_cells(cd, t0, dt, rhs, z0, cfg.inner_method(problem.driver, dt), cfg.tol,
                            cfg.max_iter)
        defect = now - y
    else:
        raise UsageError(f"unknown defect form {form!r}")
    return l2_norm(defect, sgrid.h)


def defect_sum(problem, sgrid, tgrid, P, form: str = "explicit") -> float:
    return sum(truncation_defect(problem, sgrid, tgrid, P, k, form) for k in range(tgrid.n_steps))


# mesh studies ------------------------------------------------------------------

def build_grids(problem: ProblemSpec, h: float | None = None, n_cells: int | None = None,
                dt: float | None = None, n_steps: int | None = None
                ) -> tuple[SpatialGrid, TimeGrid]:
    """Grids for ``problem``; exactly one of ``h``/``n_cells``, ``dt`` defaults to ``h``."""
    if (h is None) == (n_cells is None):
        raise ConfigurationError("give exactly one of h and n_cells")
    length = problem.hi - problem.lo
    hi = problem.hi
    if n_cells is None:
        if not h > 0:
            raise ConfigurationError(f"h must be positive, got {h}")
        n_cells = round(length / h)
        if abs(n_cells * h - length) > 1e-9 * length:
            if problem.periodic:
                raise ConfigurationError(f"h={h} does not divide the period length {length}")
            # keep h exact and push the upper wall to the next cell boundary
            n_cells = math.ceil(length / h)
            hi = problem.lo + n_cells * h
    sgrid = build_spatial_grid(problem.lo, hi, n_cells, problem.periodic)
    if n_steps is None:
        if dt is None:
            dt = sgrid.h
        if dt > problem.horizon:
            raise ConfigurationError(f"dt={dt} exceeds the horizon {problem.horizon}")
        n_steps = max(1, round(problem.horizon / dt))
    return sgrid, TimeGrid(problem.horizon, n_steps)


def solve_problem(problem: ProblemSpec, h: float | None = None, *, n_cells: int | None = None,
                  dt: float | None = None, n_steps: int | None = None,
                  cfg: SolverConfig | None = None, kernel: str = "analytic",
                  mc_samples: int = 1000, seed: int = 0, keep_surface: bool = False,
                  with_errors: bool = True) -> MeshResult:
    cfg = cfg or SolverConfig(algorithm=problem.default_algorithm)
    sgrid, tgrid = build_grids(problem, h, n_cells, dt, n_steps)
    if kernel == "analytic":
        P = assemble_density(problem.kernel, sgrid, tgrid.dt, quad_order=cfg.quad_order)
    elif kernel == "mc":
        k = problem.kernel if isinstance(problem.kernel, EmpiricalKernel) else empirical(problem.kernel)
        P = assemble_mc(k, sgrid, tgrid.dt, mc_samples, seed=seed)
    else:
        raise ConfigurationError(f"unknown kernel mode {kernel!r}")
    surface = solve_backward(problem, sgrid, tgrid, P, cfg)
    e_v = e_y0 = e_z0 = None
    if with_errors and problem.has_analytic:
        e_v = relative_l2_error(surface, problem.analytic_v, problem.payoff.kinks, cfg.quad_order)
        e_y0, e_z0 = point_errors(surface, problem)
    return MeshResult(sgrid.h, tgrid.dt, surface.y0, surface.z0, e_v, e_y0, e_z0,
                      float(mass_deficit(P).max()),
                      int(max(surface.iterations.max(), surface.outer_iterations.max())),
                      surface if keep_surface else None)


def fit_orders(rows: Sequence[MeshResult]) -> dict[str, float]:
    orders = {}
    for name in ("e_v", "e_y0", "e_z0"):
        data = [(r.h, getattr(r, name)) for r in rows]
        if len(data) >= 2 and all(e is not None and e > 0 for _, e in data):
            orders[name] = convergence_order(data)
    return orders


def convergence_study(problem: ProblemSpec, meshes: Sequence[float],
                      cfg: SolverConfig | None = None, dts: Sequence[float] | None = None,
                      **kw) -> ErrorReport:
    if len(meshes) < 2:
        raise ConfigurationError("a convergence study needs at least two meshes")
    dts = [None] * len(meshes) if dts is None else list(dts)
    rows = [solve_problem(problem, h, dt=dt, cfg=cfg, **kw) for h, dt in zip(meshes, dts)]
    return ErrorReport(rows, fit_orders(rows))


# brute-force oracle --------------------------------------------------------------

def brute_force_surface(problem: ProblemSpec, grid: SpatialGrid, tgrid: TimeGrid, P_dense,
                        cfg: SolverConfig = SolverConfig()) -> SolutionSurface:
    """Scalar re-implementation of the three recursions for tiny instances.

    Plain Python loops over at most 5 cells and 3 steps, a dense matrix
    given as nested lists, and its own quadrature, differences and inner
    solves.  Meant to be compared with :func:`solve_backward`.
    """
    n, N = grid.n_cells, tgrid.n_steps
    if n > 5 or N > 3:
        raise UsageError("brute force is limited to 5 cells and 3 steps")
    P = [[float(P_dense[i][j]) for j in range(n)] for i in range(n)]
    h, lo, dt = grid.h, grid.lo, tgrid.dt
    nodes, weights = np.polynomial.legendre.leggauss(cfg.quad_order)
    nodes = [0.5 * (float(a) + 1.0) for a in nodes]
    weights = [0.5 * float(b) for b in weights]
    drv = problem.driver
    centers = [lo + (j + 0.5) * h for j in range(n)]
    sigma = [float(np.asarray(problem.kernel.sigma(np.array(c)))) for c in centers]

    def cell_avg(fn, j, kinks=()):
        a, b = lo + j * h, lo + (j + 1) * h
        cuts = [a] + sorted(k for k in kinks if a < k < b) + [b]
        s = 0.0
        for p, q in zip(cuts[:-1], cuts[1:]):
            s += sum(wt * float(fn(p + nd * (q - p))) for nd, wt in zip(nodes, weights)) * (q - p)
        return s / h

    def gbar(t, j, y, z, fn=None):
        fn = fn or drv.g
        if drv.depends_on_x:
            return sum(wt * float(fn(t, lo + (j + nd) * h, y, z)) for nd, wt in zip(nodes, weights))
        return float(fn(t, centers[j], y, z))

    def gy_bar(t, j, y, z):
        if drv.gy is not None:
            return gbar(t, j, y, z, drv.gy)
        e = 1e-6 * max(1.0, abs(y))
        return (gbar(t, j, y + e, z) - gbar(t, j, y - e, z)) / (2 * e)

    def grad(u):
        out = []
        for j in range(n):
            if j == 0:
                d = (u[1] - u[0]) / h
            elif j == n - 1:
                d = (u[n - 1] - u[n - 2]) / h
            else:
                d = (u[j + 1] - u[j - 1]) / (2 * h)
            out.append(sigma[j] * d)
        return out

    def matvec(u):
        return [sum(P[i][j] * u[j] for j in range(n)) for i in range(n)]

    def solve(t, rhs, z, start):
        method = cfg.inner_method(drv, dt)
        y = list(start)
        for it in range(1, cfg.max_iter + 1):
            new = []
            for j in range(n):
                if method == "fixed_point":
                    new.append(rhs[j] - dt * gbar(t, j, y[j], z[j]))
                else:
                    F = y[j] + dt * gbar(t, j, y[j], z[j]) - rhs[j]
                    new.append(y[j] - F / (1.0 + dt * gy_bar(t, j, y[j], z[j])))
            change = max(abs(a - b) for a, b in zip(new, y))
            y = new
            if change <= cfg.tol:
                return y, it
        raise UsageError("brute-force inner solve did not converge")

    kinks = getattr(problem.payoff, "kinks", ())
    v = [None] * (N + 1)
    w = [None] * (N + 1)
    iters = [0] * (N + 1)
    v[N] = [cell_avg(problem.payoff, j, kinks) for j in range(n)]
    w[N] = grad(v[N])
    for k in range(N - 1, -1, -1):
        tk, tk1 = tgrid.t(k), tgrid.t(k + 1)
        if cfg.algorithm == "explicit":
            tmp = [v[k + 1][j] - dt * gbar(tk1, j, v[k + 1][j], 0.0) for j in range(n)]
            v[k] = matvec(tmp)
            w[k] = grad(v[k + 1])
        elif cfg.algorithm == "hybrid":
            w[k] = grad(v[k + 1])
            rhs = matvec(v[k + 1])
            v[k], iters[k] = solve(tk, rhs, w[k], rhs)
        else:
            rhs = matvec(v[k + 1])
            if not drv.depends_on_z:
                v[k], iters[k] = solve(tk, rhs, [0.0] * n, rhs)
            else:
                cur = list(rhs)
                for _ in range(cfg.outer_max_iter):
                    z = grad(cur)
                    new, iters[k] = solve(tk, rhs, z, cur)
                    change = max(abs(a - b) for a, b in zip(new, cur))
                    cur = new
                    if change <= cfg.outer_tol:
                        break
                else:
                    raise UsageError("brute-force Picard loop did not converge")
                v[k] = cur
            w[k] = grad(v[k])

    def interp(u, x):
        if x <= centers[0]:
            return u[0]
        if x >= centers[-1]:
            return u[-1]
        j = int((x - centers[0]) // h)
        j = min(j, n - 2)
        s = (x - centers[j]) / h
        return (1 - s) * u[j] + s * u[j + 1]

    x0 = float(problem.x0)
    return SolutionSurface(np.array(v), np.array(w), grid, tgrid, x0, interp(v[0], x0),
                           interp(w[0], x0), np.array(iters), np.ones(N + 1, dtype=np.int64),
                           cfg.algorithm)
