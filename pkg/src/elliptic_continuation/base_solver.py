"""The Laplacian solve the continuation bootstraps from, plus a factorization oracle."""
from __future__ import annotations

import numpy as np
import scipy.sparse.linalg as spla

from ._kernels import kernels
from .grid import GridFunction, norm_h0
from .operators import DiscreteOperator


class ConvergenceError(RuntimeError):
    """An iteration hit its cap; ``residual`` holds the last relative residual."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history or []


class SingularSystemError(RuntimeError):
    """The assembled system is singular: the solution is not unique."""


def cg_iteration_cap(grid) -> int:
    return 20 * grid.n_per_axis * grid.dim


def laplacian_solve_array(f: np.ndarray, h: float, rtol: float, x0: np.ndarray | None = None, maxiter=None):
    """Matrix-free CG on the Laplacian stencil; returns ``(x, iterations, true_rel_residual)``.

    The recursive CG residual drifts from the true one near machine precision,
    so after each CG run the true residual is recomputed and CG restarts from
    the current iterate while it is above ``rtol`` and budget remains.
    """
    n = f.shape[0]
    maxiter = maxiter or 20 * n * f.ndim
    f = np.ascontiguousarray(f, dtype=np.float64)
    x = np.zeros_like(f) if x0 is None else np.array(x0, dtype=np.float64, order="C")
    fnorm = float(np.sqrt(np.dot(f.ravel(), f.ravel())))
    if fnorm == 0.0:
        return np.zeros_like(f), 0, 0.0
    used = 0
    while True:
        it, _ = kernels.cg_laplacian(f, x, h, rtol, maxiter - used)
        used += it
        r = f - kernels.laplacian(x, h)
        rel = float(np.sqrt(np.dot(r.ravel(), r.ravel())) / fnorm)
        if rel <= rtol or used >= maxiter or it == 0:
            return x, used, rel


def solve_laplacian(f: GridFunction, rtol: float = 1e-10, x0: GridFunction | None = None) -> GridFunction:
    """Solve ``L0 u = f`` with ``norm_h0(L0 u - f) <= rtol * norm_h0(f)``."""
    if not 0.0 < rtol <= 1e-2:
        raise ValueError(f"rtol must lie in (0, 1e-2], got {rtol}")
    g = f.grid
    x, its, rel = laplacian_solve_array(f.values, g.h, rtol, None if x0 is None else x0.values, cg_iteration_cap(g))
    if rel > rtol:
        raise ConvergenceError(f"Laplacian CG stopped after {its} iterations at relative residual {rel:.3e}", rel)
    return GridFunction(g, x)


def sparse_lu(m):
    """``splu`` with a minimum-degree ordering on ``A^T + A``.

    All assembled matrices here have a symmetric sparsity pattern, for which
    this ordering gives noticeably less fill than the column default.
    """
    return spla.splu(m.tocsc(), permc_spec="MMD_AT_PLUS_A")


def factorize(L: DiscreteOperator):
    """Sparse LU of the assembled operator, raising SingularSystemError on failure."""
    try:
        lu = sparse_lu(L.matrix)
    except RuntimeError as exc:  # "Factor is exactly singular"
        raise SingularSystemError(f"{L.description} is singular: uniqueness of the solution fails") from exc
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= 1e-14 * diag.max():
        raise SingularSystemError(f"{L.description} is numerically singular (pivot ratio {diag.min() / diag.max():.2e})")
    return lu


def solve_direct(L: DiscreteOperator, f: GridFunction) -> GridFunction:
    """Verification oracle: factorize the assembled matrix and solve once."""
    if f.grid != L.grid:
        raise ValueError("operator and right-hand side live on different grids")
    if not np.any(f.values):
        return f.grid.zeros()
    lu = factorize(L)
    u = lu.solve(f.flat.copy())
    # one step of iterative refinement keeps the residual near round-off
    u += lu.solve(f.flat - L.matrix @ u)
    return GridFunction(f.grid, u.reshape(f.grid.shape))


def relative_residual(L: DiscreteOperator, u: GridFunction, f: GridFunction) -> float:
    fn = norm_h0(f)
    r = norm_h0(L(u) - f)
    return r / fn if fn > 0 else r
