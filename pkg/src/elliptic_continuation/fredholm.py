"""Non-symmetric perturbations: ``(L + L') u = f`` through ``u + A u = L^{-1} f``.

``L`` is the symmetric coercive operator the continuation method inverts and
``L'`` a first-order term.  With ``A = L^{-1} L'`` (compact in the continuum)
the equation is of Fredholm type: either ``I + A`` is injective and the
problem is uniquely solvable, or the homogeneous equation has a nontrivial
solution.  ``A`` need not be a contraction, so the fixed-point form is solved
with restarted GMRES, one inner ``L`` solve per application of ``A``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base_solver import SingularSystemError, factorize, sparse_lu
from .continuation import ContinuationConfig, ContinuationSolver
from .estimates import EstimatorError, _largest
from .grid import GridFunction, norm_h0
from .operators import DiscreteOperator, add


class FredholmAlternativeError(RuntimeError):
    """``I + A`` is (numerically) singular; ``direction`` spans the near-kernel."""

    category = "precondition"

    def __init__(self, message, sigma_min=0.0, direction=None):
        super().__init__(message)
        self.sigma_min = sigma_min
        self.direction = direction


@dataclass
class FredholmConfig:
    restart: int = 30
    max_iters: int = 300
    rtol: float = 1e-10
    residual_tol: float = 1e-8
    refinements: int = 3
    threshold: float = 1e-6
    inner: str = "continuation"
    continuation: ContinuationConfig | None = None
    seed: int = 0


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    history: list


def gmres(apply, b, rtol=1e-10, restart=30, max_iters=300, x0=None) -> GmresResult:
    """Restarted GMRES with modified Gram-Schmidt Arnoldi and Givens rotations.

    Stops when ``||b - apply(x)|| <= rtol ||b||``; ``residual`` is the true
    relative residual recomputed at the end of every cycle.
    """
    b = np.asarray(b, dtype=float).ravel()
    n = b.size
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).ravel()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresResult(np.zeros(n), 0, 0.0, True, [0.0])
    r = b - apply(x)
    beta = np.linalg.norm(r)
    history = [beta / bnorm]
    total = 0
    while history[-1] > rtol and total < max_iters:
        m = min(restart, max_iters - total)
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        e = np.zeros(m + 1)
        e[0] = beta
        V[0] = r / beta
        j_used = 0
        for j in range(m):
            w = apply(V[j])
            for i in range(j + 1):
                H[i, j] = w @ V[i]
                w = w - H[i, j] * V[i]
            hn = np.linalg.norm(w)
            H[j + 1, j] = hn
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            e[j + 1] = -sn[j] * e[j]
            e[j] = cs[j] * e[j]
            total += 1
            j_used = j + 1
            if abs(e[j + 1]) <= rtol * bnorm or hn == 0.0:
                break
            V[j + 1] = w / hn
        y = np.linalg.solve(np.triu(H[:j_used, :j_used]), e[:j_used])
        x = x + V[:j_used].T @ y
        r = b - apply(x)
        beta = np.linalg.norm(r)
        history.append(beta / bnorm)
        if beta == 0.0:
            break
        if len(history) > 3 and history[-1] > 0.999 * history[-2] and history[-2] > 0.999 * history[-3]:
            break  # stagnation across two full cycles
    return GmresResult(x, total, history[-1], history[-1] <= rtol, history)


def _inner_solver(L: DiscreteOperator, cfg: FredholmConfig):
    if callable(cfg.inner):
        return cfg.inner
    if cfg.inner == "continuation":
        return ContinuationSolver(L, cfg.continuation or ContinuationConfig(seed=cfg.seed))
    if cfg.inner == "direct":
        lu = factorize(L)
        return lambda g: lu.solve(np.ascontiguousarray(np.ravel(g))).reshape(L.grid.shape)
    raise ValueError(f"unknown inner solver {cfg.inner!r}")


def solve_perturbed(L: DiscreteOperator, Lprime: DiscreteOperator, f: GridFunction,
                    cfg: FredholmConfig | None = None, return_info: bool = False):
    """Solve ``(L + L') u = f`` by GMRES on ``u + L^{-1} L' u = L^{-1} f``.

    The residual of the original equation is checked afterwards and, if it
    misses ``residual_tol``, corrected by solving the fixed-point equation for
    the defect (iterative refinement).
    """
    cfg = cfg or FredholmConfig()
    grid = f.grid
    if L.grid != grid or Lprime.grid != grid:
        raise ValueError("operators and right-hand side live on different grids")
    if not np.any(f.values):
        return (grid.zeros(), {"iterations": 0, "residual": 0.0}) if return_info else grid.zeros()
    solve_L = _inner_solver(L, cfg)
    shape = grid.shape

    def apply(v):
        v = v.reshape(shape)
        return (v + solve_L(Lprime.action(v))).ravel()

    full = add(L, Lprime)
    fnorm = norm_h0(f)
    u = np.zeros(shape)
    iterations = 0
    history = []
    rhs = f.values
    for _ in range(cfg.refinements + 1):
        g = solve_L(rhs).ravel()
        res = gmres(apply, g, cfg.rtol, cfg.restart, cfg.max_iters)
        iterations += res.iterations
        history += res.history
        if not res.converged and res.residual > 1e-6:
            rep = fredholm_check(L, Lprime, cfg.seed, cfg.threshold)
            if not rep.unique:
                raise FredholmAlternativeError(
                    f"I + A is numerically singular (sigma_min = {rep.sigma_min:.3e}): "
                    "the homogeneous equation has a nontrivial near-solution", rep.sigma_min, rep.direction)
            raise FredholmAlternativeError(
                f"GMRES stalled at relative residual {res.residual:.3e} after {res.iterations} iterations",
                rep.sigma_min, rep.direction)
        u = u + res.x.reshape(shape)
        r = f.values - full.action(u)
        rel = float(np.sqrt(grid.cell_volume * np.sum(r * r)) / fnorm)
        if rel <= cfg.residual_tol:
            break
        rhs = r
    else:
        raise FredholmAlternativeError(f"residual {rel:.3e} of (L + L')u = f above {cfg.residual_tol:g} "
                                       "after refinement")
    out = GridFunction(grid, u)
    if return_info:
        return out, {"iterations": iterations, "residual": rel, "history": history}
    return out


@dataclass
class FredholmReport:
    sigma_min: float
    unique: bool
    direction: np.ndarray | None
    iterations: int


def fredholm_check(L: DiscreteOperator, Lprime: DiscreteOperator, seed: int = 0,
                   threshold: float = 1e-6) -> FredholmReport:
    """Smallest singular value of ``I + L^{-1} L'`` by inverse iteration.

    ``(I + A)^{-1} = (L + L')^{-1} L``, so Lanczos on
    ``(I + A)^{-1} (I + A)^{-T}`` needs one factorization of ``L + L'``.  An
    exactly singular factorization reports ``sigma_min = 0``.
    """
    grid = L.grid
    n = grid.size
    lm = L.matrix.tocsr()
    full = (L.matrix + Lprime.matrix).tocsc()
    try:
        lu = sparse_lu(full)
    except RuntimeError:
        return FredholmReport(0.0, False, None, 0)

    def inv(v):
        return lu.solve(np.ascontiguousarray(lm @ v))

    def inv_t(v):
        return lm.T @ lu.solve(np.ascontiguousarray(v), trans="T")

    try:
        mu, x, calls, _ = _largest(lambda v: inv(inv_t(v)), n, seed)
    except EstimatorError:
        raise SingularSystemError("inverse iteration for sigma_min(I + A) did not converge")
    sigma = 1.0 / np.sqrt(mu) if mu > 0 else 0.0
    # (I + A) maps (I + A)^{-1} x back to the unit vector x: the near-kernel direction
    v = inv(x)
    v = v / np.linalg.norm(v)
    return FredholmReport(float(sigma), bool(sigma > threshold), v.reshape(grid.shape), calls)


def compactness_proxy(sigma: np.ndarray) -> dict:
    """Decay summary of a descending singular value sequence.

    ``C`` is the smallest constant with ``sigma_k <= sigma_1 C / k`` for every
    ``k``; for the identity (no decay) it equals the dimension.  ``slope`` is
    the log-log fit over the leading half and ``tail`` is
    ``sigma_{N/2} / sigma_1``.
    """
    s = np.asarray(sigma, dtype=float)
    k = np.arange(1, s.size + 1)
    C = float(np.max(k * s / s[0]))
    half = max(2, s.size // 2)
    slope = float(np.polyfit(np.log(k[:half]), np.log(s[:half]), 1)[0])
    return {"C": C, "C_over_N": C / s.size, "slope": slope, "tail": float(s[half - 1] / s[0])}
