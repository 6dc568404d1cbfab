"""Batch command-line front end.

Usage::

    fbsde run --config run.cfg
    fbsde convergence --config conv.cfg
    fbsde domain-study --config domains.cfg

Config files hold ``key = value`` lines with ``#`` comments.  Recognised
keys: problem, algorithm, h, dt, n_cells, n_steps, lo, hi, kernel,
mc_samples, seed, tol, max_iter, outdir.  ``convergence`` reads ``h`` (and
optionally ``dt``) as comma-separated lists; ``domain-study`` reads ``hi``
as the list of upper walls ``M``.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .analysis import MeshResult, fit_orders, solve_problem
from .errors import ConfigurationError, FBSDEError, StepError
from .problems import PROBLEM_NAMES, get_problem, is_period_multiple
from .stepper import SolverConfig

logger = logging.getLogger("fbsde")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 2, 3

CONFIG_KEYS = ("problem", "algorithm", "h", "dt", "n_cells", "n_steps", "lo", "hi", "kernel",
               "mc_samples", "seed", "tol", "max_iter", "outdir")


@dataclass
class RunConfig:
    problem: str
    algorithm: Optional[str] = None
    h: list[float] = field(default_factory=list)
    dt: list[float] = field(default_factory=list)
    n_cells: Optional[int] = None
    n_steps: Optional[int] = None
    lo: Optional[float] = None
    hi: list[float] = field(default_factory=list)
    kernel: str = "analytic"
    mc_samples: int = 1000
    seed: int = 0
    tol: float = 1e-12
    max_iter: int = 100
    outdir: Path = Path("out")

    def solver_config(self, default_algorithm: str) -> SolverConfig:
        return SolverConfig(algorithm=self.algorithm or default_algorithm, tol=self.tol,
                            max_iter=self.max_iter)


def _floats(key: str, raw: str) -> list[float]:
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"{key}: expected number(s), got {raw!r}") from None


def _int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: expected an integer, got {raw!r}") from None


def parse_config(text: str, base: Path | None = None) -> RunConfig:
    """Parse the flat ``key = value`` format into a :class:`RunConfig`."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value

    if "problem" not in raw:
        raise ConfigurationError("missing required key 'problem'")
    if raw["problem"] not in PROBLEM_NAMES:
        raise ConfigurationError(f"problem: unknown problem {raw['problem']!r}")
    cfg = RunConfig(problem=raw["problem"])
    if "algorithm" in raw:
        if raw["algorithm"] not in ("explicit", "hybrid", "implicit"):
            raise ConfigurationError(f"algorithm: unknown algorithm {raw['algorithm']!r}")
        cfg.algorithm = raw["algorithm"]
    for key in ("h", "dt", "hi"):
        if key in raw:
            setattr(cfg, key, _floats(key, raw[key]))
    for key in ("n_cells", "n_steps", "mc_samples", "seed", "max_iter"):
        if key in raw:
            setattr(cfg, key, _int(key, raw[key]))
    if "lo" in raw:
        cfg.lo = _floats("lo", raw["lo"])[0]
    if "tol" in raw:
        cfg.tol = _floats("tol", raw["tol"])[0]
    if "kernel" in raw:
        if raw["kernel"] not in ("analytic", "mc"):
            raise ConfigurationError(f"kernel: expected 'analytic' or 'mc', got {raw['kernel']!r}")
        cfg.kernel = raw["kernel"]
    if "outdir" in raw:
        cfg.outdir = Path(raw["outdir"])
    if bool(cfg.h) == (cfg.n_cells is not None):
        raise ConfigurationError("give exactly one of h and n_cells")
    if cfg.dt and cfg.n_steps is not None:
        raise ConfigurationError("give at most one of dt and n_steps")
    if any(x <= 0 for x in cfg.h + cfg.dt):
        raise ConfigurationError("h and dt must be positive")
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _problem_for(cfg: RunConfig, hi: float | None = None):
    problem = get_problem(cfg.problem)
    lo = cfg.lo
    if hi is None and len(cfg.hi) == 1:
        hi = cfg.hi[0]
    if lo is not None or hi is not None:
        problem = problem.with_domain(lo, hi)
        if problem.periodic:
            problem = replace(problem, periodic=is_period_multiple(problem.lo, problem.hi))
    if problem.horizon < (cfg.dt[0] if cfg.dt else 0.0):
        raise ConfigurationError(f"dt={cfg.dt[0]} exceeds the horizon {problem.horizon}")
    return problem


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _write_surface(path: Path, surface) -> None:
    N1, n = surface.v.shape
    k = np.repeat(np.arange(N1), n)
    t = np.repeat(surface.tgrid.times, n)
    j = np.tile(np.arange(n), N1)
    x = np.tile(surface.grid.centers, N1)
    cols = np.column_stack([k, t, j, x, surface.v.ravel(), surface.w.ravel()])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("k,t,j,x_center,v,w\n")
        np.savetxt(fh, cols, fmt=["%d", "%.17g", "%d", "%.17g", "%.17g", "%.17g"], delimiter=",")


SUMMARY_HEADER = ("y0", "z0", "e_y0", "e_z0", "E_h", "mass_deficit_max", "iterations_max",
                  "converged")


def cmd_run(config_path) -> int:
    cfg = load_config(config_path)
    if len(cfg.h) > 1 or len(cfg.dt) > 1 or len(cfg.hi) > 1:
        raise ConfigurationError("run takes a single h, dt and hi")
    problem = _problem_for(cfg)
    solver = cfg.solver_config(problem.default_algorithm)
    cfg.outdir.mkdir(parents=True, exist_ok=True)
    try:
        res = solve_problem(problem, cfg.h[0] if cfg.h else None, n_cells=cfg.n_cells,
                            dt=cfg.dt[0] if cfg.dt else None, n_steps=cfg.n_steps, cfg=solver,
                            kernel=cfg.kernel, mc_samples=cfg.mc_samples, seed=cfg.seed,
                            keep_surface=True)
    except StepError as exc:
        print(f"fbsde: {exc}", file=sys.stderr)
        _write_csv(cfg.outdir / "summary.csv", SUMMARY_HEADER,
                   [(None, None, None, None, None, None, None, False)])
        return EXIT_NONCONVERGENCE
    _write_surface(cfg.outdir / "surface.csv", res.surface)
    _write_csv(cfg.outdir / "summary.csv", SUMMARY_HEADER,
               [(res.y0, res.z0, res.e_y0, res.e_z0, res.e_v, res.mass_deficit_max,
                 res.iterations_max, True)])
    logger.info("y0=%r z0=%r e_y0=%s e_z0=%s E_h=%s", res.y0, res.z0, res.e_y0, res.e_z0, res.e_v)
    return EXIT_OK


def _solve_mesh(args) -> MeshResult:
    cfg, h, dt, hi = args
    problem = _problem_for(cfg, hi)
    return solve_problem(problem, h, dt=dt, cfg=cfg.solver_config(problem.default_algorithm),
                         kernel=cfg.kernel, mc_samples=cfg.mc_samples, seed=cfg.seed)


def _map(jobs):
    """Solve meshes, in worker processes when ``FBSDE_THREADS`` > 1; order is preserved."""
    try:
        workers = int(os.environ.get("FBSDE_THREADS", "1"))
    except ValueError:
        raise ConfigurationError("FBSDE_THREADS must be an integer") from None
    results = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            futures = [pool.submit(_solve_mesh, j) for j in jobs]
            for f in futures:
                try:
                    results.append(f.result())
                except StepError as exc:
                    return results, exc
        return results, None
    for j in jobs:
        try:
            results.append(_solve_mesh(j))
        except StepError as exc:
            return results, exc
    return results, None


def cmd_convergence(config_path) -> int:
    cfg = load_config(config_path)
    if len(cfg.h) < 2:
        raise ConfigurationError("convergence needs at least two meshes in h")
    if cfg.dt and len(cfg.dt) != len(cfg.h):
        raise ConfigurationError("dt list must match the h list")
    if cfg.n_steps is not None or len(cfg.hi) > 1:
        raise ConfigurationError("convergence takes h (and optional dt) lists only")
    _problem_for(cfg)
    dts = cfg.dt or [None] * len(cfg.h)
    jobs = [(cfg, h, dt, None) for h, dt in zip(cfg.h, dts)]
    rows, failure = _map(jobs)
    cfg.outdir.mkdir(parents=True, exist_ok=True)
    body = [(r.h, r.dt, r.e_v, r.e_y0, r.e_z0) for r in rows]
    if failure is None:
        orders = fit_orders(rows)
        body.append(("order", None, orders.get("e_v"), orders.get("e_y0"), orders.get("e_z0")))
    _write_csv(cfg.outdir / "convergence.csv", ("h", "dt", "E_h", "e_y0", "e_z0"), body)
    if failure is not None:
        logger.error("%s", failure)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_domain_study(config_path) -> int:
    cfg = load_config(config_path)
    if not cfg.hi:
        raise ConfigurationError("domain-study needs a non-empty list of upper walls in hi")
    if len(cfg.h) > 1 or len(cfg.dt) > 1:
        raise ConfigurationError("domain-study takes a single h and dt")
    problem = get_problem(cfg.problem)
    if not problem.has_analytic:
        raise ConfigurationError(f"problem {cfg.problem!r} has no analytic solution")
    if problem.params is not None:
        strike = max(problem.params.K, problem.params.K1, problem.params.K2)
        bad = [M for M in cfg.hi if M <= strike]
        if bad:
            raise ConfigurationError(f"hi: walls {bad} do not exceed the strike {strike}")
    jobs = [(cfg, cfg.h[0] if cfg.h else None, cfg.dt[0] if cfg.dt else None, M) for M in cfg.hi]
    if cfg.n_cells is not None:
        raise ConfigurationError("domain-study needs h, not n_cells")
    rows, failure = _map(jobs)
    cfg.outdir.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.outdir / "domain_study.csv", ("M", "e_y0", "e_z0"),
               [(M, r.e_y0, r.e_z0) for M, r in zip(cfg.hi, rows)])
    if failure is not None:
        logger.error("%s", failure)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


COMMANDS = {"run": cmd_run, "convergence": cmd_convergence, "domain-study": cmd_domain_study}


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fbsde", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to a key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args.config)
    except ConfigurationError as exc:
        print(f"fbsde: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FBSDEError as exc:
        print(f"fbsde: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
