"""Fully discrete cell-partition schemes for decoupled Markovian FBSDEs."""

from .analysis import (brute_force_surface, convergence_order, convergence_study,
                       point_errors, relative_l2_error, solve_problem, truncation_defect)
from .grid import (CellField, SpatialGrid, TimeGrid, build_spatial_grid, interpolate,
                   l2_norm, project)
from .problems import (MarketParams, ProblemSpec, black_scholes_call, black_scholes_straddle,
                       differential_rates, example1, example3, get_problem, normal_cdf)
from .semigroup import (BrownianKernel, EmpiricalKernel, GeometricKernel, TransitionMatrix,
                        apply, assemble_density, assemble_mc, chapman_kolmogorov_defect,
                        mass_deficit)
from .stepper import (Driver, SolutionSurface, SolverConfig, gradient, solve_backward,
                      step_explicit, step_hybrid, step_implicit, t_operator_explicit,
                      t_operator_implicit, terminal_coefficients)

__version__ = "0.1.0"
