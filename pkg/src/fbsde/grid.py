"""Uniform cell partitions, the indicator basis and cell-average projection.

Cell ``j`` of a :class:`SpatialGrid` is the half-open interval
``(lo + j*h, lo + (j+1)*h]``.  A :class:`CellField` stores one value per
cell: the cell average ``u_j``.  The coefficient of the normalised
indicator ``1_{I_j} / sqrt(h)`` is ``u_j * sqrt(h)``; it is never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, EvaluationError, UsageError

DEFAULT_QUAD_ORDER = 5


@lru_cache(maxsize=None)
def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to the unit interval [0, 1]."""
    if order < 1:
        raise ConfigurationError(f"quadrature order must be positive, got {order}")
    x, w = np.polynomial.legendre.leggauss(order)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform partition of ``(lo, hi]`` into ``n_cells`` cells.

    ``periodic`` turns the partition into a ring: the cell after the last
    one is cell 0.  Periodic grids are used when the problem data are
    periodic with a period dividing ``hi - lo``.
    """

    lo: float
    hi: float
    n_cells: int
    periodic: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo >= self.hi:
            raise ConfigurationError(f"need lo < hi, got lo={self.lo}, hi={self.hi}")
        if int(self.n_cells) != self.n_cells or self.n_cells < 2:
            raise ConfigurationError(f"need n_cells >= 2, got {self.n_cells}")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / self.n_cells

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def center(self, j):
        return self.lo + (np.asarray(j) + 0.5) * self.h

    @property
    def centers(self) -> np.ndarray:
        return self.lo + (np.arange(self.n_cells) + 0.5) * self.h

    @property
    def edges(self) -> np.ndarray:
        """The ``n_cells + 1`` cell boundaries, ``edges[0] = lo``."""
        e = self.lo + np.arange(self.n_cells + 1) * self.h
        e[-1] = self.hi
        return e

    def locate(self, x):
        """Index of the cell containing ``x``; ``-1`` / ``n_cells`` off the left/right."""
        j = np.ceil((np.asarray(x, dtype=float) - self.lo) / self.h).astype(np.int64) - 1
        return np.clip(j, -1, self.n_cells)

    def quadrature_nodes(self, order: int = DEFAULT_QUAD_ORDER) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell quadrature nodes (shape ``(n_cells, order)``) and unit-sum weights."""
        t, w = gauss_legendre(order)
        nodes = self.lo + (np.arange(self.n_cells)[:, None] + t[None, :]) * self.h
        return nodes, w

    def with_domain(self, lo: float, hi: float) -> "SpatialGrid":
        n = max(2, round((hi - lo) / self.h))
        return SpatialGrid(lo, hi, n, self.periodic)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def t(self, k: int) -> float:
        if k == self.n_steps:
            return float(self.horizon)
        return k * self.dt

    @property
    def times(self) -> np.ndarray:
        ts = np.arange(self.n_steps + 1) * self.dt
        ts[-1] = self.horizon
        return ts


@dataclass(frozen=True, eq=False)
class CellField:
    """Cell-average values on a grid.  The array is made read-only."""

    values: np.ndarray
    grid: SpatialGrid = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise UsageError(f"field has shape {v.shape}, grid has {self.grid.n_cells} cells")
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise EvaluationError(f"non-finite field value in cell {bad}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def coefficients(self) -> np.ndarray:
        """Coefficients in the orthonormal indicator basis, ``u_j * sqrt(h)``."""
        return self.values * math.sqrt(self.grid.h)

    def __len__(self):
        return self.grid.n_cells


def build_spatial_grid(lo: float, hi: float, n_cells: int, periodic: bool = False) -> SpatialGrid:
    return SpatialGrid(float(lo), float(hi), int(n_cells), periodic)


def _eval_finite(f: Callable, x: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        y = np.asarray(f(x), dtype=float)
    if y.shape != x.shape:
        y = np.broadcast_to(y, x.shape)
    if not np.all(np.isfinite(y)):
        bad = np.argwhere(~np.isfinite(y))[0]
        raise EvaluationError(f"non-finite function value in cell {int(bad[0])} at x={x[tuple(bad)]!r}")
    return y


def cell_averages(f: Callable, grid: SpatialGrid, quad_order: int = DEFAULT_QUAD_ORDER,
                  kinks: Iterable[float] = ()) -> np.ndarray:
    """Array of cell averages of the vectorised function ``f``.

    Cells containing one of ``kinks`` in their interior are split at the
    kink and each piece integrated with the same rule.
    """
    nodes, w = grid.quadrature_nodes(quad_order)
    avg = _eval_finite(f, nodes) @ w

    h = grid.h
    t, _ = gauss_legendre(quad_order)
    for j, pts in _kinked_cells(grid, kinks).items():
        a = grid.lo + j * h
        b = a + h
        bounds = [a, *pts, b]
        total = 0.0
        for p0, p1 in zip(bounds[:-1], bounds[1:]):
            x = p0 + t * (p1 - p0)
            try:
                vals = _eval_finite(f, x)
            except EvaluationError as exc:
                raise EvaluationError(f"non-finite function value in cell {j}") from exc
            total += (vals @ w) * (p1 - p0)
        avg[j] = total / h
    return avg


def _kinked_cells(grid: SpatialGrid, kinks: Iterable[float]) -> dict[int, list[float]]:
    out: dict[int, list[float]] = {}
    h = grid.h
    for k in sorted(set(float(k) for k in kinks)):
        if not grid.lo < k < grid.hi:
            continue
        j = int(grid.locate(k))
        a = grid.lo + j * h
        # a kink on a cell boundary needs no split
        if abs(k - a) <= 1e-12 * max(1.0, abs(k)) or abs(k - (a + h)) <= 1e-12 * max(1.0, abs(k)):
            continue
        out.setdefault(j, []).append(k)
    return out


def project(f: Callable, grid: SpatialGrid, quad_order: int = DEFAULT_QUAD_ORDER,
            kinks: Sequence[float] = ()) -> CellField:
    """Cell-average projection of ``f`` onto the indicator basis of ``grid``."""
    return CellField(cell_averages(f, grid, quad_order, kinks), grid)


def step_function(field: CellField) -> Callable[[np.ndarray], np.ndarray]:
    """Piecewise-constant extension of a field, as a vectorised function."""
    grid = field.grid

    def f(x):
        j = np.clip(grid.locate(x), 0, grid.n_cells - 1)
        return field.values[j]

    return f


def interpolate(field: CellField, x: float) -> float:
    """Piecewise-linear interpolation through the cell centres.

    Inside the two half cells next to the walls the nearest centre value is
    used.  On a periodic grid the interpolant wraps around instead.
    """
    grid = field.grid
    x = float(x)
    if not grid.lo < x <= grid.hi:
        raise DomainError(f"x={x} outside ({grid.lo}, {grid.hi}]")
    c = grid.centers
    u = field.values
    if grid.periodic:
        c = np.concatenate(([c[-1] - grid.length], c, [c[0] + grid.length]))
        u = np.concatenate(([u[-1]], u, [u[0]]))
    return float(np.interp(x, c, u))


def l2_norm(field: CellField | np.ndarray, h: float | None = None) -> float:
    """Discrete L2 norm ``sqrt(sum_j u_j^2 h)``."""
    if isinstance(field, CellField):
        values, h = field.values, field.grid.h
    else:
        values = np.asarray(field, dtype=float)
        if h is None:
            raise UsageError("l2_norm of a bare array needs the mesh size h")
    return math.sqrt(float(values @ values) * h)
