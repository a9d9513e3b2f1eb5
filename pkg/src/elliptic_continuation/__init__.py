"""Finite-difference Dirichlet solver for divergence-form elliptic operators by continuation in a parameter."""
from .base_solver import ConvergenceError, SingularSystemError, solve_direct, solve_laplacian
from .continuation import (
    CoercivityError,
    ContinuationConfig,
    ContinuationSolver,
    SolveReport,
    StageReport,
    continuation_solve,
    picard_stage,
    plan_schedule,
    range_diagnostics,
    verify_contraction,
)
from .estimates import (
    ConstantsReport,
    estimate_c3,
    estimate_coercivity,
    estimate_constants,
    operator_norm_h2,
    perturbation_bound,
)
from .fredholm import FredholmConfig, compactness_proxy, fredholm_check, solve_perturbed
from .grid import Grid, GridFunction, make_grid, norm_h0, norm_h1, norm_h2
from .mollifier import make_kernel, mollify, orthogonality_probe
from .operators import (
    CoefficientField,
    DiscreteOperator,
    assemble,
    assemble_first_order,
    assemble_laplacian,
    check_ellipticity,
    homotopy,
)

__version__ = "0.1.0"
