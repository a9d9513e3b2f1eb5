"""Numerical estimates of the constants in the a priori inequalities.

All extremal quotients are computed with ARPACK's implicitly restarted
Lanczos iteration (a Krylov-accelerated power iteration) from a seeded start
vector, then checked against random probes:

* ``c2``      smallest eigenvalue of ``L``               (``(Lu, u) >= c2 (u, u)``)
* ``c3``      ``min ||L u||_0 / ||u||_2``                (lower bound side)
* ``c_pert``  ``max ||(L - L0) u||_0 / ||u||_2``         (upper bound side)
* ``c3'``     ``c_pert / c3``, the step-size constant of the continuation.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .base_solver import SingularSystemError, factorize, sparse_lu
from .grid import Grid, sobolev_gram
from .operators import DiscreteOperator, assemble_laplacian, check_ellipticity, difference, homotopy

MAX_ITER = 500
# the top of the H2/L2 quotient spectra is tightly clustered; a wide Krylov
# subspace keeps the restart count within budget
EIG_TOL = 1e-6
NCV = 60
PROBE_TOL = 1e-6
N_PROBES = 200
S_SAMPLES = (0.0, 0.25, 0.5, 0.75, 1.0)


class EstimatorError(RuntimeError):
    """An estimate failed to converge or was contradicted by a probe."""


class Estimate(float):
    """A float that remembers how it was obtained."""

    def __new__(cls, value, iterations=0, rel_change=0.0, method="", vector=None):
        obj = super().__new__(cls, value)
        obj.iterations = int(iterations)
        obj.rel_change = float(rel_change)
        obj.method = method
        # extremal vector, reusable as a start vector for a nearby operator
        obj.vector = vector
        return obj

    def scaled(self, alpha):
        return Estimate(alpha * float(self), self.iterations, self.rel_change, self.method, self.vector)


class _Counter:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.fn(np.ravel(x))


def _start_vector(n, seed):
    return np.random.default_rng(seed).standard_normal(n)


def _largest(a_apply, n, seed, b=None, b_solve=None, v0=None):
    """Largest eigenvalue of the symmetric pencil ``(A, B)`` (B = identity when omitted).

    ``v0`` overrides the seeded start vector; passing the extremal vector of a
    nearby problem cuts the iteration count several-fold.
    """
    if v0 is None:
        v0 = _start_vector(n, seed)
    a_op = _Counter(a_apply)
    A = spla.LinearOperator((n, n), matvec=a_op, dtype=float)
    kw = {}
    if b is not None:
        kw["M"] = b
        kw["Minv"] = spla.LinearOperator((n, n), matvec=b_solve, dtype=float)
    try:
        vals, vecs = spla.eigsh(
            A, k=1, which="LA", v0=v0, tol=EIG_TOL, maxiter=MAX_ITER, ncv=min(NCV, n - 1), **kw
        )
    except spla.ArpackNoConvergence as exc:
        raise EstimatorError(f"Lanczos did not converge in {MAX_ITER} restarts") from exc
    lam, x = float(vals[0]), vecs[:, 0]
    bx = x if b is None else b @ x
    res = np.linalg.norm(a_apply(x) - lam * bx) / max(abs(lam) * np.linalg.norm(bx), 1e-300)
    return lam, x, a_op.calls, float(res)


def _probes(grid: Grid, count, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, grid.size))


def _gershgorin_lower(m: sp.spmatrix) -> float:
    m = sp.csr_matrix(m)
    diag = m.diagonal()
    off = np.asarray(abs(m).sum(axis=1)).ravel() - np.abs(diag)
    return float(np.min(diag - off))


def estimate_coercivity(L: DiscreteOperator, seed: int = 0) -> Estimate:
    """Smallest eigenvalue of symmetric ``L`` in the discrete L2 inner product.

    Shift-and-invert about a Gershgorin lower bound, so the eigenvalue closest
    to the shift is the smallest one.  The returned Rayleigh quotient is never
    below the true smallest eigenvalue.
    """
    if not L.symmetric:
        raise ValueError("coercivity estimate needs a symmetric operator")
    m = sp.csc_matrix(L.matrix)
    n = m.shape[0]
    lower = _gershgorin_lower(m)
    shift = lower - 1e-6 * (abs(lower) + 1.0)
    try:
        lu = sparse_lu(m - shift * sp.identity(n, format="csc"))
    except RuntimeError as exc:
        raise EstimatorError("shifted operator could not be factorized") from exc
    mu, x, calls, res = _largest(lu.solve, n, seed)
    rq = float(x @ (m @ x) / (x @ x))
    return Estimate(rq, calls, res, "shift-invert Lanczos")


def _operator_matrix(op):
    return sp.csr_matrix(op.matrix)


def estimate_c3(L: DiscreteOperator, grid: Grid | None = None, seed: int = 0, probes: int = N_PROBES,
                v0=None) -> Estimate:
    """``min_u ||L u||_0 / ||u||_2`` via the largest eigenvalue of ``L^-T G2 L^-1 / h^d``."""
    grid = grid or L.grid
    g2 = sobolev_gram(grid, 2)
    lu = factorize(L)
    vol = grid.cell_volume

    def apply(v):
        w = lu.solve(np.ascontiguousarray(v))
        return lu.solve(g2 @ w, trans="T") / vol

    mu, x, calls, res = _largest(apply, grid.size, seed, v0=v0)
    c3 = Estimate(1.0 / np.sqrt(mu), calls, res, "Lanczos on inverted quotient", x)
    m = _operator_matrix(L)
    for u in _probes(grid, probes, seed + 1):
        lu_norm = np.sqrt(vol * np.sum((m @ u) ** 2))
        u2 = np.sqrt(u @ (g2 @ u))
        if lu_norm < c3 * (1 - PROBE_TOL) * u2:
            raise EstimatorError(f"probe violates ||Lu||_0 >= c3 ||u||_2 with c3={float(c3):.6g}")
    return c3


def _h2_norm_of_map(forward, adjoint, grid: Grid, seed: int, target_gram=None, v0=None):
    """``max ||M u||_T / ||u||_2`` where ``T`` is the target Gram matrix (default discrete H2)."""
    g2 = sobolev_gram(grid, 2)
    tg = g2 if target_gram is None else target_gram
    g2_lu = sparse_lu(g2)

    def apply(u):
        return adjoint(tg @ forward(u))

    probe = _start_vector(grid.size, seed + 7)
    if not np.any(forward(probe)):
        return 0.0, 1, 0.0, None
    mu, x, calls, res = _largest(apply, grid.size, seed, b=g2, b_solve=g2_lu.solve, v0=v0)
    return float(np.sqrt(max(mu, 0.0))), calls, res, x


def _certify_upper(value, forward, grid, seed, probes, target_gram=None):
    g2 = sobolev_gram(grid, 2)
    tg = g2 if target_gram is None else target_gram
    for u in _probes(grid, probes, seed + 2):
        mu = forward(u)
        lhs = np.sqrt(mu @ (tg @ mu))
        rhs = np.sqrt(u @ (g2 @ u))
        if lhs > value * (1 + PROBE_TOL) * rhs + 1e-300:
            raise EstimatorError(f"probe exceeds the estimated norm {value:.6g}")


def perturbation_bound(L: DiscreteOperator, L0: DiscreteOperator, grid: Grid | None = None, seed: int = 0,
                       probes: int = N_PROBES) -> Estimate:
    """Norm of ``L - L0`` from discrete H2 to discrete L2."""
    grid = grid or L.grid
    b = sp.csr_matrix(L.matrix - L0.matrix)
    b.eliminate_zeros()
    if b.nnz == 0:
        return Estimate(0.0, 0, 0.0, "zero perturbation")
    w = grid.cell_volume * sp.identity(grid.size, format="csr")
    value, calls, res, x = _h2_norm_of_map(lambda u: b @ u, lambda v: b.T @ v, grid, seed, target_gram=w)
    _certify_upper(value, lambda u: b @ u, grid, seed, probes, target_gram=w)
    return Estimate(value, calls, res, "Lanczos, H2-weighted pencil", x)


def inverse_times(L_prev: DiscreteOperator, B, scale: float = 1.0) -> spla.LinearOperator:
    """The composed map ``u -> scale * L_prev^{-1} (B u)`` with its transpose.

    ``B`` may be a DiscreteOperator or a sparse matrix.  The inverse is
    applied through a sparse factorization, i.e. to working precision.
    """
    lu = factorize(L_prev)
    bm = sp.csr_matrix(B.matrix if isinstance(B, DiscreteOperator) else B)
    n = bm.shape[0]

    def mv(u):
        return scale * lu.solve(np.ascontiguousarray(bm @ np.ravel(u)))

    def rmv(v):
        return scale * (bm.T @ lu.solve(np.ascontiguousarray(np.ravel(v)), trans="T"))

    return spla.LinearOperator((n, n), matvec=mv, rmatvec=rmv, dtype=float)


def operator_norm_h2(M, grid: Grid, seed: int = 0, probes: int = N_PROBES, v0=None) -> Estimate:
    """Discrete H2 -> H2 norm of a linear map given as a LinearOperator (needs ``rmatvec``)."""
    if isinstance(M, DiscreteOperator):
        M = spla.aslinearoperator(_operator_matrix(M))
    value, calls, res, x = _h2_norm_of_map(M.matvec, M.rmatvec, grid, seed, v0=v0)
    if value > 0:
        _certify_upper(value, M.matvec, grid, seed, probes)
    return Estimate(value, calls, res, "Lanczos, H2-weighted pencil", x)


@dataclass
class ConstantsReport:
    c0: float
    c1: float
    c2: float
    c3: float
    c_pert: float
    c3_prime: float
    grid: str
    dim: int
    n: int
    c3_L0: float = float("nan")
    c3_by_s: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    rel_change: dict = field(default_factory=dict)
    # extremal vectors, kept for warm starts of later estimates; never serialized
    vectors: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.c0 <= self.c1:
            raise ValueError("c0 must not exceed c1")

    CSV_COLUMNS = (
        "c0", "c1", "c2", "c3", "c_pert", "c3_prime", "grid", "dim", "n",
        "iters_c2", "iters_c3", "iters_c_pert", "relchg_c2", "relchg_c3", "relchg_c_pert",
    )

    def _row(self):
        out = {k: getattr(self, k) for k in self.CSV_COLUMNS[:9]}
        for key in ("c2", "c3", "c_pert"):
            out[f"iters_{key}"] = self.iterations.get(key, 0)
            out[f"relchg_{key}"] = self.rel_change.get(key, 0.0)
        return out

    def csv_header(self) -> str:
        return ",".join(self.CSV_COLUMNS)

    def csv_row(self) -> str:
        row = self._row()
        return ",".join(_fmt(row[c]) for c in self.CSV_COLUMNS)

    def to_keyvalue(self) -> str:
        buf = io.StringIO()
        for k, v in self._row().items():
            buf.write(f"{k}={_fmt(v)}\n")
        buf.write(f"c3_L0={_fmt(self.c3_L0)}\n")
        for s, v in sorted(self.c3_by_s.items()):
            buf.write(f"c3_s{s:g}={_fmt(v)}\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(float(v), ".17g")
    return str(v)


def estimate_constants(L: DiscreteOperator, L0: DiscreteOperator, seed: int = 0,
                       s_samples=S_SAMPLES, probes: int = N_PROBES) -> ConstantsReport:
    """Every constant the continuation needs, for ``L`` against the Laplacian ``L0``.

    ``c3`` is the smallest of the estimates over ``L_s`` at the sampled ``s``
    values, since the step size must hold uniformly along the homotopy.
    """
    grid = L.grid
    if L.coeffs is not None:
        c0, c1 = check_ellipticity(L.coeffs, grid)
    else:
        c0 = c1 = float("nan")
    c2 = estimate_coercivity(L, seed)
    if c2 <= 0:
        raise SingularSystemError(f"coercivity fails: smallest eigenvalue {float(c2):.6g} <= 0")
    c3_by_s = {}
    best = None
    # samples run in increasing s, each warm-started from the previous extremal vector
    prev = laplacian_c3(grid, seed).vector
    for s in sorted(s_samples):
        if s == 0.0:
            est = laplacian_c3(grid, seed)
        else:
            est = estimate_c3(homotopy(L0, L, s), grid, seed, probes, v0=prev)
        prev = est.vector
        c3_by_s[float(s)] = float(est)
        if best is None or est < best:
            best = est
    c3_l0 = c3_by_s.get(0.0) or float(laplacian_c3(grid, seed))
    cp = perturbation_bound(L, L0, grid, seed, probes)
    return ConstantsReport(
        c0=c0, c1=c1, c2=float(c2), c3=float(best), c_pert=float(cp), c3_prime=float(cp) / float(best),
        grid=grid.ident, dim=grid.dim, n=grid.n_per_axis, c3_L0=c3_l0, c3_by_s=c3_by_s,
        iterations={"c2": c2.iterations, "c3": best.iterations, "c_pert": cp.iterations},
        rel_change={"c2": c2.rel_change, "c3": best.rel_change, "c_pert": cp.rel_change},
        vectors={"c3": best.vector, "c_pert": cp.vector},
    )


@lru_cache(maxsize=8)
def laplacian_c3(grid: Grid, seed: int = 0) -> Estimate:
    """``c3`` of the Laplacian, cached per grid (it is the slowest estimate to converge)."""
    return estimate_c3(assemble_laplacian(grid), grid, seed)


def chain_terms(L: DiscreteOperator, L0: DiscreteOperator, seed: int = 0) -> tuple[float, float]:
    """``(||L0^-1 (L - L0)||_{H2}, c_pert / c3(L0))``; the first never exceeds the second."""
    grid = L.grid
    direct = operator_norm_h2(inverse_times(L0, difference(L, L0)), grid, seed)
    bound = perturbation_bound(L, L0, grid, seed) / laplacian_c3(grid, seed)
    return float(direct), float(bound)
