"""Continuation in a parameter: reach ``L`` from the Laplacian through contraction stages.

Along ``L_s = L0 + s (L - L0)`` each stage ``s_prev -> s_next`` solves
``L_next u = f`` by the fixed-point iteration

    u <- L_prev^{-1} (f - (s_next - s_prev) (L - L0) u),

which contracts in the discrete H2 norm as long as
``(s_next - s_prev) * ||L_prev^{-1} (L - L0)||_2 < 1``.  With ``c3' = c_pert / c3``
bounding that operator norm uniformly in ``s``, uniform steps of
``theta / c3'`` (``theta = 1/2`` by default) reach ``s = 1`` in finitely many
stages.  Only the Laplacian is ever inverted directly.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .base_solver import SingularSystemError, factorize, laplacian_solve_array, solve_direct
from .estimates import (
    ConstantsReport,
    EstimatorError,
    estimate_coercivity,
    estimate_constants,
    inverse_times,
    laplacian_c3,
    operator_norm_h2,
)
from .grid import GridFunction, norm_h0, norm_h2
from .operators import (
    CoefficientField,
    DiscreteOperator,
    assemble,
    assemble_laplacian,
    check_ellipticity,
    difference,
    homotopy,
)

log = logging.getLogger(__name__)

RATIO_SLACK = 0.05
# above this contraction factor the flattened fixed-point loop is replaced by PCG in "auto"
AUTO_PICARD_LIMIT = 0.5
NESTED_MAX_NODES = 31 * 31


class ContinuationError(RuntimeError):
    category = "divergence"


class CoercivityError(ContinuationError):
    """``(Lu, u) >= c2 (u, u)`` fails with ``c2 > 0``: uniqueness is not guaranteed."""

    category = "precondition"


class ScheduleError(ContinuationError):
    category = "precondition"


class StageRejected(ContinuationError):
    """A stage's measured contraction norm is not below one."""


class StageDivergence(ContinuationError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class ContinuationConfig:
    schedule_mode: str = "paper"
    safety_theta: float = 0.5
    picard_rtol: float = 1e-10
    picard_max_iters: int = 200
    inner_solve_rtol: float = 1e-12
    max_stages: int = 64
    nested: bool = False
    inner: str = "auto"
    measure_stage_norms: bool = True
    oracle: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.schedule_mode not in ("paper", "adaptive"):
            raise ValueError(f"schedule_mode must be 'paper' or 'adaptive', got {self.schedule_mode!r}")
        if not 0.0 < self.safety_theta < 1.0:
            raise ValueError("safety_theta must lie in (0, 1)")
        if self.picard_rtol <= 0 or self.inner_solve_rtol <= 0:
            raise ValueError("tolerances must be positive")
        if self.inner not in ("auto", "picard", "pcg"):
            raise ValueError(f"inner must be 'auto', 'picard' or 'pcg', got {self.inner!r}")
        if self.picard_max_iters < 1 or self.max_stages < 1:
            raise ValueError("iteration and stage caps must be positive")


@dataclass
class StageReport:
    s_start: float
    s_end: float
    measured_norm: float
    picard_iters: int
    final_residual: float
    geometric_ratio_observed: float
    ratio_source: str = "increments"
    error_history: list = field(default_factory=list)

    CSV_COLUMNS = (
        "stage", "s_start", "s_end", "measured_norm", "picard_iters", "final_residual",
        "geometric_ratio_observed", "ratio_source",
    )

    def csv_row(self, index) -> str:
        vals = [index, self.s_start, self.s_end, self.measured_norm, self.picard_iters, self.final_residual,
                self.geometric_ratio_observed, self.ratio_source]
        return ",".join(_fmt(v) for v in vals)


@dataclass
class SolveReport:
    stages: list
    constants: ConstantsReport | None
    total_inner_solves: int
    final_residual_vs_L: float
    wall_time: float
    schedule: list = field(default_factory=list)

    def to_csv(self) -> str:
        """One row per stage and a summary row (wall time is left out to keep runs byte-identical)."""
        lines = [",".join(StageReport.CSV_COLUMNS)]
        lines += [st.csv_row(k) for k, st in enumerate(self.stages, 1)]
        last = self.schedule[-1] if self.schedule else 0.0
        lines.append(",".join(_fmt(v) for v in ("summary", 0.0, last, max((st.measured_norm for st in self.stages), default=0.0),
                                                 sum(st.picard_iters for st in self.stages), self.final_residual_vs_L,
                                                 float(self.total_inner_solves), "total_inner_solves")))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def plan_schedule(constants: ConstantsReport | float, mode: str = "paper", safety_theta: float = 0.5,
                  max_stages: int = 64, measure=None) -> list:
    """Breakpoints ``0 = s_0 < s_1 < ... < s_m = 1``.

    ``paper`` takes uniform steps of ``safety_theta / c3'`` and clamps the last
    one to ``s = 1``.  ``adaptive`` needs ``measure(s)`` returning
    ``||L_s^{-1} (L - L0)||_2`` and picks each step so the stage norm equals
    ``safety_theta``.
    """
    c3p = float(constants.c3_prime if isinstance(constants, ConstantsReport) else constants)
    if mode == "paper":
        if not c3p > 0:
            raise ScheduleError(f"c3' must be positive, got {c3p}")
        step = safety_theta / c3p
        count = max(1, math.ceil(1.0 / step - 1e-12))
        if count > max_stages:
            raise ScheduleError(f"c3' = {c3p:.6g} needs {count} stages, more than max_stages = {max_stages}")
        return [min(k * step, 1.0) if k < count else 1.0 for k in range(count + 1)]
    if mode == "adaptive":
        if measure is None:
            raise ValueError("adaptive schedule needs a measure(s) callable")
        pts = [0.0]
        while pts[-1] < 1.0:
            if len(pts) > max_stages:
                raise ScheduleError(f"adaptive schedule exceeded max_stages = {max_stages} (c3' = {c3p:.6g})")
            norm = measure(pts[-1])
            step = safety_theta / norm if norm > 0 else 1.0
            pts.append(min(pts[-1] + step, 1.0))
        return pts
    raise ValueError(f"unknown schedule mode {mode!r}")


# -- solvers for the previous stage ---------------------------------------------


class LaplacianSolver:
    """Warm-started CG solves of ``L0 v = g``; counts solves."""

    def __init__(self, grid, rtol):
        self.grid = grid
        self.rtol = rtol
        self.solves = 0
        self._last = None

    def __call__(self, g: np.ndarray, warm: bool = True) -> np.ndarray:
        x, its, rel = laplacian_solve_array(g, self.grid.h, self.rtol, self._last if warm else None)
        if rel > self.rtol and warm and self._last is not None:
            # warm starts can stall at round-off; a cold start sometimes gets through
            x, its, rel = laplacian_solve_array(g, self.grid.h, self.rtol, None)
        if rel > self.rtol:
            raise StageDivergence(f"Laplacian solve stalled at relative residual {rel:.3e}")
        self.solves += 1
        if warm:
            self._last = x
        return x


def _h2(values, grid) -> float:
    return norm_h2(GridFunction(grid, values))


def fixed_point(base, perturb, g, v0, rtol, max_iters, grid, contraction=None):
    """Iterate ``v <- base(g - perturb(v))`` until the H2 increment is small.

    Returns ``(v, iterations, increments)``.  Stops when
    ``||dv||_2 <= rtol (1 - rho) ||v||_2`` (rho = the known contraction bound,
    or the observed increment ratio).  A run of growing increments raises.
    """
    v = base(g) if v0 is None else v0
    incs = []
    growing = 0
    for it in range(1, max_iters + 1):
        v_new = base(g - perturb(v))
        inc = _h2(v_new - v, grid)
        vn = _h2(v_new, grid)
        incs.append(inc)
        v = v_new
        if len(incs) >= 2 and incs[-2] > 0:
            ratio = incs[-1] / incs[-2]
            growing = growing + 1 if ratio > 1.0 else 0
        else:
            ratio = 0.0
        rho = contraction if contraction is not None else min(ratio, 0.99)
        if inc <= rtol * max(1.0 - rho, 1e-3) * vn or vn == 0.0:
            return v, it, incs
        if growing >= 5 or not np.isfinite(inc):
            raise StageDivergence("fixed-point iteration is not contracting", incs)
    raise StageDivergence(f"fixed-point iteration hit the cap of {max_iters} iterations", incs)


class FlattenedSolver:
    """Solve ``L_s v = g`` by a fixed-point loop against ``L0`` with step ``s``."""

    def __init__(self, base: LaplacianSolver, B: DiscreteOperator, s: float, cfg: ContinuationConfig):
        self.base, self.B, self.s, self.cfg = base, B, s, cfg
        self._last = None
        self.iterations = 0

    def __call__(self, g):
        s, B = self.s, self.B
        try:
            v, its, _ = fixed_point(self.base, lambda v: s * B.action(v), g, self._last, self.cfg.inner_solve_rtol,
                                    self.cfg.picard_max_iters, self.base.grid)
        except StageDivergence as exc:
            raise StageDivergence(
                f"flattened inner solve for L_s(s={s:g}) does not contract against L0; "
                "use nested=true or a finer schedule", exc.history
            ) from exc
        self.iterations += its
        self._last = v
        return v


class PreconditionedSolver:
    """Solve ``L_s v = g`` by conjugate gradients on ``L_s`` preconditioned with ``L0^{-1}``.

    Used when ``s ||L0^{-1}(L - L0)||_2`` is too large for the fixed-point
    loop to contract (or to contract quickly).  ``L_s`` is symmetric positive
    definite as a convex combination of two such operators.
    """

    def __init__(self, base: LaplacianSolver, Ls: DiscreteOperator, cfg: ContinuationConfig):
        self.base, self.Ls, self.cfg = base, Ls, cfg
        self.iterations = 0
        self._last = None

    def __call__(self, g):
        import scipy.sparse.linalg as spla

        grid = self.base.grid
        shape, n = grid.shape, grid.size
        A = spla.LinearOperator((n, n), matvec=lambda v: self.Ls.action(v.reshape(shape)).ravel(), dtype=float)
        # preconditioner inputs are unrelated residuals, so warm starts would only slow CG down
        M = spla.LinearOperator((n, n), matvec=lambda v: self.base(v.reshape(shape), warm=False).ravel(),
                                dtype=float)
        count = [0]

        def tick(_):
            count[0] += 1

        # successive right-hand sides of a Picard loop converge, so start from the last solution
        x, info = spla.cg(A, g.ravel(), x0=self._last, rtol=self.cfg.inner_solve_rtol,
                          maxiter=self.cfg.picard_max_iters, M=M, callback=tick)
        self.iterations += count[0]
        if info != 0:
            raise StageDivergence(f"preconditioned inner solve did not reach {self.cfg.inner_solve_rtol:g}")
        self._last = x
        return x.reshape(shape)


class NestedSolver:
    """Solve ``L_s v = g`` by a fixed-point loop against the previous stage's solver."""

    def __init__(self, prev, B: DiscreteOperator, step: float, cfg: ContinuationConfig, grid):
        self.prev, self.B, self.step, self.cfg, self.grid = prev, B, step, cfg, grid
        self._last = None

    def __call__(self, g):
        step, B = self.step, self.B
        v, _, _ = fixed_point(self.prev, lambda v: step * B.action(v), g, self._last, self.cfg.inner_solve_rtol,
                              self.cfg.picard_max_iters, self.grid)
        self._last = v
        return v


def _flattened(base, L0, L, B, s, cfg, measure):
    if cfg.inner == "picard":
        return FlattenedSolver(base, B, s, cfg)
    if cfg.inner == "auto" and s * measure(0.0) < AUTO_PICARD_LIMIT:
        return FlattenedSolver(base, B, s, cfg)
    return PreconditionedSolver(base, homotopy(L0, L, s), cfg)


# -- one stage -------------------------------------------------------------------------


def picard_stage(prev_solver, L_prev: DiscreteOperator, L_next: DiscreteOperator, f: GridFunction,
                 cfg: ContinuationConfig, *, s_start: float = 0.0, s_end: float = 1.0, measured_norm=None,
                 perturbation=None, u0: GridFunction | None = None, reference: GridFunction | None = None):
    """Solve ``L_next u = f`` by ``u <- prev_solver(f - (L_next - L_prev) u)``.

    ``prev_solver`` maps an array ``g`` to ``L_prev^{-1} g``.  When
    ``reference`` (the exact discrete solution) is given, the observed ratio is
    taken from the true H2 errors; otherwise from successive increments.
    """
    grid = f.grid
    rho = measured_norm
    if rho is not None and rho >= 1.0:
        raise StageRejected(f"stage [{s_start:g}, {s_end:g}] has contraction norm {rho:.4g} >= 1; shrink the step")
    if perturbation is None:
        def perturbation(v):
            return L_next.action(v) - L_prev.action(v)
    g = f.values
    u = prev_solver(g) if u0 is None else np.array(u0.values)
    errs = []
    ref = None if reference is None else reference.values
    if ref is not None:
        errs.append(_h2(u - ref, grid))
    incs = []
    for it in range(1, cfg.picard_max_iters + 1):
        u_new = prev_solver(g - perturbation(u))
        incs.append(_h2(u_new - u, grid))
        u = u_new
        if ref is not None:
            errs.append(_h2(u - ref, grid))
        un = _h2(u, grid)
        if len(incs) >= 2 and incs[-2] > 0:
            obs = incs[-1] / incs[-2]
        else:
            obs = 0.0
        r = rho if rho is not None else min(obs, 0.99)
        if incs[-1] <= cfg.picard_rtol * max(1.0 - r, 1e-3) * un or un == 0.0:
            break
        if len(incs) > 6 and all(incs[-k] > incs[-k - 1] for k in range(1, 6)):
            raise StageDivergence(f"stage [{s_start:g}, {s_end:g}] diverges", incs)
    else:
        raise StageDivergence(f"stage [{s_start:g}, {s_end:g}] hit picard_max_iters={cfg.picard_max_iters}", incs)

    if ref is not None:
        seq, source = errs, "oracle"
        floor = 1e-8 * max(_h2(ref, grid), 1e-300)
    else:
        seq, source = incs, "increments"
        floor = 1e-8 * max(_h2(u, grid), 1e-300)
    ratios = [b / a for a, b in zip(seq, seq[1:]) if a > floor and b > floor]
    observed = max(ratios, default=0.0)
    res = norm_h0(L_next(GridFunction(grid, u)) - f) / max(norm_h0(f), 1e-300)
    report = StageReport(
        s_start=float(s_start),
        s_end=float(s_end),
        measured_norm=float("nan") if rho is None else float(rho),
        picard_iters=it,
        final_residual=float(res),
        geometric_ratio_observed=float(observed),
        ratio_source=source,
        error_history=[float(e) for e in seq],
    )
    return GridFunction(grid, u), report


def verify_contraction(stage: StageReport) -> bool:
    """Measured norm below one, observed ratio within the slack of it, and the observed ratio itself below one."""
    obs = stage.geometric_ratio_observed
    return bool(stage.measured_norm < 1.0 and obs <= stage.measured_norm + RATIO_SLACK and obs < 1.0)


# -- full solve ------------------------------------------------------------------------


def _stage_norm(L0, L, B, s, seed, v0=None):
    """``||L_s^{-1} (L - L0)||`` in the discrete H2 norm (measured through a factorization)."""
    Ls = L if s == 1.0 else homotopy(L0, L, s)
    return operator_norm_h2(inverse_times(Ls, B), L.grid, seed, v0=v0)


class ContinuationSolver:
    """``L^{-1}`` realized by continuation from the Laplacian, set up once per operator.

    Setup checks ellipticity and coercivity, estimates the constants and plans
    the schedule; ``solve(f)`` then runs the stages for one right-hand side.
    Stage solvers and measured stage norms are reused across calls.
    """

    def __init__(self, L: DiscreteOperator, cfg: ContinuationConfig | None = None):
        self.cfg = cfg = cfg or ContinuationConfig()
        if not L.symmetric:
            raise ValueError("continuation needs a symmetric (divergence-form) operator")
        self.L = L
        self.grid = grid = L.grid
        if L.coeffs is not None:
            check_ellipticity(L.coeffs, grid)
        if cfg.nested and grid.size > NESTED_MAX_NODES:
            raise ValueError(f"nested realization is limited to {NESTED_MAX_NODES} nodes")
        self.L0 = assemble_laplacian(grid)
        c2 = estimate_coercivity(L, cfg.seed)
        if c2 <= 0.0:
            raise CoercivityError(
                f"coercivity (Lu,u) >= c2 (u,u) with c2 > 0 fails: smallest eigenvalue {float(c2):.6g}; "
                "the solution is not unique"
            )
        self.base = LaplacianSolver(grid, cfg.inner_solve_rtol)
        self.B = difference(L, self.L0)
        self._norms = {}
        self._last_vec = None
        self.trivial = L.coeffs is not None and L.coeffs.is_laplacian()
        if self.trivial:
            c0, c1 = check_ellipticity(L.coeffs, grid)
            c3 = float(laplacian_c3(grid, cfg.seed))
            self.constants = ConstantsReport(c0, c1, float(c2), c3, 0.0, 0.0, grid.ident, grid.dim,
                                             grid.n_per_axis, c3_L0=c3)
            self.schedule = [0.0]
        else:
            self.constants = estimate_constants(L, self.L0, cfg.seed)
            # the maximizer of ||(L - L0) u||_0 / ||u||_2 is a good start for ||L0^{-1} (L - L0)||_2
            self._last_vec = self.constants.vectors.get("c_pert")
            if cfg.schedule_mode == "paper":
                self.schedule = plan_schedule(self.constants, "paper", cfg.safety_theta, cfg.max_stages)
            else:
                self.schedule = plan_schedule(self.constants, "adaptive", cfg.safety_theta, cfg.max_stages,
                                              self.measure)
            log.info("schedule %s (c3'=%.4g)", self.schedule, self.constants.c3_prime)
        self._solvers = {0.0: self.base}
        self.solves = 0

    def measure(self, s: float) -> float:
        """``||L_s^{-1} (L - L0)||_2``, cached per ``s``."""
        if s not in self._norms:
            est = _stage_norm(self.L0, self.L, self.B, s, self.cfg.seed, self._last_vec)
            self._norms[s], self._last_vec = float(est), est.vector
        return self._norms[s]

    def _solver_at(self, k):
        sched, cfg = self.schedule, self.cfg
        s_prev = sched[k - 1]
        if s_prev not in self._solvers:
            if cfg.nested:
                self._solvers[s_prev] = NestedSolver(self._solver_at(k - 1), self.B, s_prev - sched[k - 2], cfg,
                                                     self.grid)
            else:
                self._solvers[s_prev] = _flattened(self.base, self.L0, self.L, self.B, s_prev, cfg, self.measure)
        return self._solvers[s_prev]

    def __call__(self, g: np.ndarray) -> np.ndarray:
        """Array-level solve, for use as an inner solver."""
        u, _ = self.solve(GridFunction(self.grid, g))
        return u.values

    def solve(self, f: GridFunction):
        t0 = time.perf_counter()
        grid, cfg, L, L0, B = self.grid, self.cfg, self.L, self.L0, self.B
        if f.grid != grid:
            raise ValueError("operator and right-hand side live on different grids")
        self.solves += 1
        if not np.any(f.values):
            return grid.zeros(), SolveReport([], self.constants, 0, 0.0, time.perf_counter() - t0, [])
        solves0 = self.base.solves
        if self.trivial:
            u = GridFunction(grid, self.base(f.values))
            res = norm_h0(L(u) - f) / norm_h0(f)
            return u, SolveReport([], self.constants, self.base.solves - solves0, float(res),
                                  time.perf_counter() - t0, [0.0])

        stages = []
        u = None
        sched = self.schedule
        for k in range(1, len(sched)):
            s_prev, s_next = sched[k - 1], sched[k]
            step = s_next - s_prev
            solver = self._solver_at(k)
            L_prev = L0 if s_prev == 0.0 else homotopy(L0, L, s_prev)
            L_next = L if s_next == 1.0 else homotopy(L0, L, s_next)
            measured = cfg.measure_stage_norms or cfg.schedule_mode == "adaptive"
            rho = step * self.measure(s_prev) if measured else None
            reference = solve_direct(L_next, f) if cfg.oracle else None
            u, rep = picard_stage(
                solver, L_prev, L_next, f, cfg, s_start=s_prev, s_end=s_next, measured_norm=rho,
                perturbation=lambda v, step=step: step * B.action(v), u0=u, reference=reference,
            )
            log.info("stage %d [%g, %g]: rho=%.4g, %d iterations, ratio %.4g", k, s_prev, s_next,
                     rep.measured_norm, rep.picard_iters, rep.geometric_ratio_observed)
            stages.append(rep)

        res = norm_h0(L(u) - f) / norm_h0(f)
        report = SolveReport(stages, self.constants, self.base.solves - solves0, float(res),
                             time.perf_counter() - t0, list(sched))
        if res > 10 * cfg.picard_rtol:
            raise StageDivergence(f"final residual {res:.3e} exceeds 10 * picard_rtol", [res])
        return u, report


def continuation_solve(coeffs: CoefficientField, f: GridFunction, cfg: ContinuationConfig | None = None):
    """Solve ``L u = f`` for the operator assembled from ``coeffs``.

    Returns ``(u, SolveReport)``.  Refuses (CoercivityError) when the smallest
    eigenvalue of ``L`` is not positive.
    """
    if coeffs.grid != f.grid:
        raise ValueError("coefficients and right-hand side live on different grids")
    check_ellipticity(coeffs, f.grid)
    if not np.any(f.values):
        return f.grid.zeros(), SolveReport([], None, 0, 0.0, 0.0, [])
    t0 = time.perf_counter()
    solver = ContinuationSolver(assemble(coeffs), cfg)
    u, report = solver.solve(f)
    report.wall_time = time.perf_counter() - t0
    return u, report


# -- range diagnostics -----------------------------------------------------------------


@dataclass
class RangeReport:
    sigma_min: float
    norm_bound: float
    lsq_residual: float
    surjective: bool
    message: str


def range_diagnostics(L: DiscreteOperator, seed: int = 0, rel_threshold: float = 1e-10) -> RangeReport:
    """Discrete check that the range of ``L`` is everything.

    Reports the smallest singular value (discrete L2 inner product) and the
    relative residual of a least-squares solve for a random right-hand side.
    """
    import scipy.sparse.linalg as spla

    from .estimates import _largest

    m = L.matrix.tocsr()
    n = m.shape[0]
    bound = float(np.sqrt(spla.norm(m, 1) * spla.norm(m, np.inf)))
    f = np.random.default_rng(seed).standard_normal(n)
    try:
        lu = factorize(L)
    except SingularSystemError as exc:
        x = spla.lsqr(m, f, atol=1e-14, btol=1e-14, iter_lim=20 * n)[0]
        res = float(np.linalg.norm(m @ x - f) / np.linalg.norm(f))
        return RangeReport(0.0, bound, res, False, f"singular: {exc}")

    def apply(v):
        return lu.solve(lu.solve(np.ascontiguousarray(v), trans="T"))

    try:
        mu, _, _, _ = _largest(apply, n, seed)
        sigma = 1.0 / np.sqrt(mu)
    except EstimatorError:
        sigma = 0.0
    x = lu.solve(f)
    x += lu.solve(f - m @ x)
    res = float(np.linalg.norm(m @ x - f) / np.linalg.norm(f))
    ok = sigma > rel_threshold * bound and res <= 1e-8
    msg = "range is the whole space" if ok else "range deficient: the discrete solvability check fails"
    return RangeReport(float(sigma), bound, res, bool(ok), msg)
