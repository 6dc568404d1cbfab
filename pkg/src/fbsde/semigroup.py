"""Discrete transition semigroup of a 1-D diffusion on a cell partition.

The matrix entry ``P[i, j]`` is the probability that the diffusion started
uniformly in cell ``i`` lies in cell ``j`` after one time step::

    P[i, j] = (1/h) * int_{I_i} [F(dt, x, right_j) - F(dt, x, left_j)] dx

where ``F`` is the transition CDF.  The inner integral is exact; the outer
one uses Gauss-Legendre quadrature.  Entries far outside the kernel's bulk
are never formed, so every matrix is stored banded (CSR).

For SDEs without a closed-form density, :func:`assemble_mc` estimates the
same probabilities from Euler-Maruyama samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr, ndtri

from .errors import AssemblyError, ConfigurationError, ModelError, UsageError
from .grid import DEFAULT_QUAD_ORDER, CellField, SpatialGrid, gauss_legendre

DEFAULT_BAND_EPS = 1e-10
_ROW_BLOCK = 256


class TransitionKernel:
    """Transition law of a time-homogeneous scalar diffusion ``dX = b dt + s dB``."""

    analytic = False

    def drift(self, x):
        raise NotImplementedError

    def sigma(self, x):
        raise NotImplementedError


@dataclass(frozen=True)
class BrownianKernel(TransitionKernel):
    """Arithmetic Brownian motion with constant drift and volatility.

    ``vol = 0`` is accepted and gives the deterministic shift ``x + drift*dt``.
    """

    drift_rate: float = 0.0
    vol: float = 1.0
    analytic = True

    def __post_init__(self):
        if self.vol < 0:
            raise ModelError(f"volatility must be non-negative, got {self.vol}")

    def drift(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.drift_rate)

    def sigma(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.vol)

    def cdf(self, dt, x, y):
        mean = x + self.drift_rate * dt
        if self.vol == 0:
            return (y >= mean).astype(float)
        return ndtr((y - mean) / (self.vol * math.sqrt(dt)))

    def density(self, dt, x, y):
        s = self.vol * math.sqrt(dt)
        z = (y - x - self.drift_rate * dt) / s
        return np.exp(-0.5 * z * z) / (s * math.sqrt(2 * math.pi))

    def support(self, dt, x_lo, x_hi, eps):
        z = _tail_quantile(eps) * self.vol * math.sqrt(dt)
        shift = self.drift_rate * dt
        return x_lo + shift - z, x_hi + shift + z


@dataclass(frozen=True)
class GeometricKernel(TransitionKernel):
    """Geometric Brownian motion ``dX = mu X dt + vol X dB`` on ``x > 0``."""

    mu: float
    vol: float
    analytic = True

    def __post_init__(self):
        if not self.vol > 0:
            raise ModelError(f"volatility must be positive, got {self.vol}")

    def drift(self, x):
        return self.mu * np.asarray(x, dtype=float)

    def sigma(self, x):
        return self.vol * np.asarray(x, dtype=float)

    def _log_params(self, dt):
        return (self.mu - 0.5 * self.vol ** 2) * dt, self.vol * math.sqrt(dt)

    def cdf(self, dt, x, y):
        m, s = self._log_params(dt)
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        out = np.zeros(x.shape)
        pos = y > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            out[pos] = ndtr((np.log(y[pos] / x[pos]) - m) / s)
        return out

    def density(self, dt, x, y):
        m, s = self._log_params(dt)
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        out = np.zeros(x.shape)
        pos = y > 0
        z = (np.log(y[pos] / x[pos]) - m) / s
        out[pos] = np.exp(-0.5 * z * z) / (y[pos] * s * math.sqrt(2 * math.pi))
        return out

    def support(self, dt, x_lo, x_hi, eps):
        m, s = self._log_params(dt)
        z = _tail_quantile(eps) * s
        return x_lo * math.exp(m - z), x_hi * math.exp(m + z)


@dataclass(frozen=True)
class EmpiricalKernel(TransitionKernel):
    """Diffusion given only through vectorised coefficient functions."""

    drift_fn: Callable[[np.ndarray], np.ndarray]
    sigma_fn: Callable[[np.ndarray], np.ndarray]
    substeps: int = 1

    def __post_init__(self):
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")

    def drift(self, x):
        return np.broadcast_to(np.asarray(self.drift_fn(x), dtype=float), np.shape(x))

    def sigma(self, x):
        return np.broadcast_to(np.asarray(self.sigma_fn(x), dtype=float), np.shape(x))


def empirical(kernel: TransitionKernel, substeps: int = 1) -> EmpiricalKernel:
    """Sampling-only view of an analytic kernel (same coefficients)."""
    return EmpiricalKernel(kernel.drift, kernel.sigma, substeps)


def _tail_quantile(eps: float) -> float:
    # each side of the window may lose at most eps/400 of the mass, which keeps
    # a well-interior row within 1e-12 of unit mass at the default eps
    return float(-ndtri(eps / 400.0))


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    matrix: sp.csr_matrix = field(repr=False)
    dt: float
    band: int
    grid: SpatialGrid = field(repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def row_mass(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def matvec(self, values: np.ndarray) -> np.ndarray:
        if values.shape[-1] != self.n:
            raise UsageError(f"vector of length {values.shape[-1]} against {self.n}x{self.n} matrix")
        return self.matrix @ values

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    @classmethod
    def from_dense(cls, dense, grid: SpatialGrid, dt: float) -> "TransitionMatrix":
        """Wrap a hand-written matrix; used for tiny test instances."""
        a = np.asarray(dense, dtype=float)
        if a.shape != (grid.n_cells, grid.n_cells):
            raise UsageError(f"matrix shape {a.shape} does not match {grid.n_cells} cells")
        m = sp.csr_matrix(a)
        rows, cols = m.nonzero()
        band = int(np.abs(rows - cols).max()) if rows.size else 0
        return cls(m, float(dt), band, grid)


def _window(kernel, grid: SpatialGrid, dt: float, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """First and last column index (inclusive, unwrapped) for each row."""
    h = grid.h
    left = grid.lo + np.arange(grid.n_cells) * h
    ylo, yhi = kernel.support(dt, left, left + h, eps)
    j0 = np.floor((ylo - grid.lo) / h).astype(np.int64)
    j1 = np.floor((yhi - grid.lo) / h).astype(np.int64)
    if not grid.periodic:
        j0 = np.clip(j0, 0, grid.n_cells - 1)
        j1 = np.clip(j1, 0, grid.n_cells - 1)
    return j0, np.maximum(j1, j0)


def assemble_density(kernel: TransitionKernel, grid: SpatialGrid, dt: float,
                     band_eps: float = DEFAULT_BAND_EPS, quad_order: int = DEFAULT_QUAD_ORDER,
                     renormalize: bool = False) -> TransitionMatrix:
    """Banded transition matrix from a kernel with a closed-form CDF."""
    if not getattr(kernel, "analytic", False):
        raise UsageError(f"{type(kernel).__name__} has no closed-form CDF; use assemble_mc")
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if not 0 < band_eps < 1:
        raise ConfigurationError(f"band_eps must lie in (0, 1), got {band_eps}")

    n, h = grid.n_cells, grid.h
    t, w = gauss_legendre(quad_order)
    j0, j1 = _window(kernel, grid, dt, band_eps)
    rows_out, cols_out, vals_out = [], [], []
    band = 0
    for start in range(0, n, _ROW_BLOCK):
        rows = np.arange(start, min(start + _ROW_BLOCK, n))
        a, b = j0[rows], j1[rows]
        width = int((b - a).max()) + 1
        m = np.arange(width + 1)
        # relative coordinates keep the Brownian matrix exactly shift invariant
        x = grid.lo + (rows[:, None] + t[None, :]) * h
        edges = grid.lo + (a[:, None] + m[None, :]) * h
        if isinstance(kernel, BrownianKernel):
            cdf = kernel.cdf(dt, 0.0, ((a - rows)[:, None, None] + m[None, None, :]
                                       - t[None, :, None]) * h)
        else:
            cdf = kernel.cdf(dt, x[:, :, None], edges[:, None, :])
        probs = np.einsum("rqm,q->rm", np.diff(cdf, axis=2), w)
        cols = a[:, None] + m[None, :-1]
        valid = cols <= b[:, None]
        if not np.all(np.isfinite(probs[valid])):
            r, c = np.argwhere(~np.isfinite(probs) & valid)[0]
            raise AssemblyError(f"non-finite transition probability at (i, j) = "
                                f"({int(rows[r])}, {int(cols[r, c])})")
        probs = np.where(probs < 0, 0.0, probs)
        rr = np.broadcast_to(rows[:, None], cols.shape)[valid]
        cc = cols[valid]
        band = max(band, int(np.abs(cc - rr).max()))
        if grid.periodic:
            cc = cc % n
        rows_out.append(rr)
        cols_out.append(cc)
        vals_out.append(probs[valid])

    mat = sp.coo_matrix(
        (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(n, n)).tocsr()
    mat.sum_duplicates()
    if renormalize:
        mat = _renormalize(mat)
    return TransitionMatrix(mat, float(dt), band, grid)


def _renormalize(mat: sp.csr_matrix) -> sp.csr_matrix:
    mass = np.asarray(mat.sum(axis=1)).ravel()
    scale = np.divide(1.0, mass, out=np.zeros_like(mass), where=mass > 0)
    return sp.diags(scale) @ mat


def _row_generator(seed: int, row: int) -> np.random.Generator:
    if seed < 0:
        raise ConfigurationError(f"seed must be non-negative, got {seed}")
    key = (int(seed) << 64) | int(row)
    return np.random.Generator(np.random.Philox(key=key))


def assemble_mc(kernel: TransitionKernel, grid: SpatialGrid, dt: float,
                samples_per_cell: int, strata_per_cell: int = 1, seed: int = 0,
                renormalize: bool = False) -> TransitionMatrix:
    """Monte Carlo estimate of the transition matrix.

    Row ``i`` uses its own Philox stream keyed by ``(seed, i)``, so the
    result does not depend on the order in which rows are processed.  Within
    a row, sample ``k`` starts in stratum ``k mod strata_per_cell`` of the
    cell.  Samples that leave ``(lo, hi]`` are lost (mass deficit); on a
    periodic grid they wrap around.
    """
    if samples_per_cell < 1 or strata_per_cell < 1:
        raise ConfigurationError("samples_per_cell and strata_per_cell must be >= 1")
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    n, h = grid.n_cells, grid.h
    substeps = getattr(kernel, "substeps", 1)
    ds = dt / substeps
    sq = math.sqrt(ds)
    stratum = np.arange(samples_per_cell) % strata_per_cell

    rows_out, cols_out, vals_out = [], [], []
    band = 0
    for i in range(n):
        rng = _row_generator(seed, i)
        u = 1.0 - rng.random(samples_per_cell)  # (0, 1]: stays inside (left, right]
        noise = rng.standard_normal((substeps, samples_per_cell))
        x = grid.lo + (i + (stratum + u) / strata_per_cell) * h
        for s in range(substeps):
            sig = kernel.sigma(x)
            if np.any(sig < 0):
                raise ModelError(f"negative volatility {float(sig.min())} in row {i}")
            x = x + kernel.drift(x) * ds + sig * sq * noise[s]
        if grid.periodic:
            x = grid.lo + np.mod(x - grid.lo, grid.length)
            j = np.clip(grid.locate(x), 0, n - 1)
        else:
            j = grid.locate(x)
            j = j[(j >= 0) & (j < n)]
        counts = np.bincount(j, minlength=n)
        cols = np.flatnonzero(counts)
        if cols.size:
            band = max(band, int(np.abs(cols - i).max()))
        rows_out.append(np.full(cols.size, i))
        cols_out.append(cols)
        vals_out.append(counts[cols] / samples_per_cell)

    mat = sp.csr_matrix(
        (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(n, n))
    if renormalize:
        mat = _renormalize(mat)
    return TransitionMatrix(mat, float(dt), band, grid)


def apply(P: TransitionMatrix, field: CellField) -> CellField:
    """``P`` applied to a cell field (one step of the discrete semigroup)."""
    if field.grid.n_cells != P.n:
        raise UsageError(f"field with {field.grid.n_cells} cells against {P.n}x{P.n} matrix")
    return CellField(P.matrix @ field.values, field.grid)


def mass_deficit(P: TransitionMatrix) -> np.ndarray:
    """Per-row probability of leaving the domain, ``1 - sum_j P[i, j]``."""
    return 1.0 - P.row_mass


def chapman_kolmogorov_defect(kernel: TransitionKernel, grid: SpatialGrid, dt: float,
                              band_eps: float = DEFAULT_BAND_EPS, interior: bool = True,
                              quad_order: int = DEFAULT_QUAD_ORDER) -> float:
    """Largest row L1 distance between ``P(dt) @ P(dt)`` and ``P(2 dt)``.

    With ``interior`` set, only rows whose ``2 dt`` window stays inside the
    domain are compared, so wall losses do not mask the discretisation defect.
    """
    one = assemble_density(kernel, grid, dt, band_eps, quad_order).matrix
    two = assemble_density(kernel, grid, 2 * dt, band_eps, quad_order).matrix
    diff = abs(one @ one - two)
    row_l1 = np.asarray(diff.sum(axis=1)).ravel()
    if interior and not grid.periodic:
        h = grid.h
        left = grid.lo + np.arange(grid.n_cells) * h
        ylo, yhi = kernel.support(2 * dt, left, left + h, band_eps)
        keep = (ylo > grid.lo) & (yhi < grid.hi)
        if keep.any():
            row_l1 = row_l1[keep]
    return float(row_l1.max())


def dump_matrix(P: TransitionMatrix, out: TextIO) -> None:
    """Write ``P`` as text: header ``n,dt,band`` then one ``i,j,value`` line per entry."""
    out.write(f"{P.n},{P.dt!r},{P.band}\n")
    coo = P.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
        out.write(f"{int(i)},{int(j)},{float(v)!r}\n")


def load_matrix(src: TextIO, grid: SpatialGrid) -> TransitionMatrix:
    header = src.readline().strip().split(",")
    n, dt, band = int(header[0]), float(header[1]), int(header[2])
    if n != grid.n_cells:
        raise UsageError(f"dump has {n} cells, grid has {grid.n_cells}")
    data = np.loadtxt(src, delimiter=",", ndmin=2)
    if data.size == 0:
        mat = sp.csr_matrix((n, n))
    else:
        mat = sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))),
                            shape=(n, n))
    return TransitionMatrix(mat, dt, band, grid)
