"""Coefficient fields and discrete divergence-form operators.

The operator ``L u = -d_i(a_ij d_j u) + q u`` is discretized in flux form:
diagonal terms use ``a_ii`` at face midpoints, mixed terms use centered
differences with ``a_ij`` at the nodes, written as ``C_i^T a_ij C_j +
C_j^T a_ij C_i`` so the discrete operator is exactly symmetric.

Every operator carries a matrix-free action (the hot path) and builds its
sparse matrix lazily from the same coefficients through independent code.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from ._kernels import kernels
from .catalog import Constant, ScalarFunction, sup_gradient
from .grid import Grid, GridFunction, GridMismatchError, centered_difference, difference_matrices


class EllipticityError(ValueError):
    """The coefficient matrix fails to be positive definite somewhere."""

    def __init__(self, message, node=None, xi=None, value=None):
        super().__init__(message)
        self.node = node
        self.xi = xi
        self.value = value


@dataclass(eq=False)
class CoefficientField:
    """Sampled ``a_ij`` (nodes and face midpoints) and ``q`` (nodes) on one grid."""

    grid: Grid
    a_nodes: np.ndarray  # (dim, dim, *grid.shape)
    a_faces: tuple  # a_ii at the n+1 face midpoints along axis i
    q: np.ndarray
    grad_bound: float = 0.0
    functions: Mapping | None = None  # catalog functions, when known

    def __post_init__(self):
        g = self.grid
        self.a_nodes = np.asarray(self.a_nodes, dtype=float)
        self.q = np.broadcast_to(np.asarray(self.q, dtype=float), g.shape).copy()
        self.a_faces = tuple(np.asarray(f, dtype=float) for f in self.a_faces)
        if self.a_nodes.shape != (g.dim, g.dim) + g.shape:
            raise ValueError(f"a_nodes has shape {self.a_nodes.shape}")
        for i, f in enumerate(self.a_faces):
            want = tuple(g.n_per_axis + (k == i) for k in range(g.dim))
            if f.shape != want:
                raise ValueError(f"face coefficients along axis {i} have shape {f.shape}, want {want}")
        if not np.array_equal(self.a_nodes, np.swapaxes(self.a_nodes, 0, 1)):
            raise ValueError("a_ij must equal a_ji at every node")
        arrays = [self.a_nodes, self.q, *self.a_faces]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("coefficients must be finite")
        if self.grad_bound < 0:
            raise ValueError("grad_bound must be non-negative")

    @classmethod
    def from_functions(cls, grid: Grid, a: Mapping | None = None, q=0.0, grad_bound=None):
        """Sample catalog functions.

        ``a`` maps 0-based pairs ``(i, j)`` with ``i <= j`` to functions or
        constants; unspecified diagonal entries default to 1, off-diagonal to 0.
        """
        d = grid.dim
        funcs = {}
        for i in range(d):
            for j in range(i, d):
                val = (a or {}).get((i, j), (a or {}).get((j, i), 1.0 if i == j else 0.0))
                funcs[(i, j)] = val if callable(val) else Constant(float(val))
        qf = q if callable(q) else Constant(float(q))
        coords = grid.coords()
        nodes = np.empty((d, d) + grid.shape)
        for (i, j), fn in funcs.items():
            nodes[i, j] = nodes[j, i] = np.broadcast_to(fn(*coords), grid.shape)
        faces = tuple(np.broadcast_to(funcs[(i, i)](*grid.face_coords(i)), grid.face_coords(i)[0].shape) for i in range(d))
        if grad_bound is None:
            grad_bound = 0.0
            for fn in funcs.values():
                if isinstance(fn, ScalarFunction):
                    grad_bound = max(grad_bound, sup_gradient(fn, coords))
        all_funcs = dict(funcs)
        all_funcs["q"] = qf
        return cls(grid, nodes, faces, np.broadcast_to(qf(*coords), grid.shape), float(grad_bound), all_funcs)

    @classmethod
    def identity(cls, grid: Grid, q=0.0):
        return cls.from_functions(grid, None, q)

    @classmethod
    def from_arrays(cls, grid: Grid, a_nodes, q, grad_bound=0.0):
        """Build from nodal arrays; face values average the two adjacent nodes.

        Boundary faces take the value of their single interior neighbour.
        """
        a_nodes = np.asarray(a_nodes, dtype=float)
        faces = []
        for i in range(grid.dim):
            diag = np.moveaxis(a_nodes[i, i], i, 0)
            f = np.empty((diag.shape[0] + 1,) + diag.shape[1:])
            f[1:-1] = 0.5 * (diag[1:] + diag[:-1])
            f[0], f[-1] = diag[0], diag[-1]
            faces.append(np.moveaxis(f, 0, i))
        return cls(grid, a_nodes, tuple(faces), q, grad_bound)

    @property
    def mixed(self) -> dict:
        d = self.grid.dim
        return {(i, j): self.a_nodes[i, j] for i in range(d) for j in range(i + 1, d) if np.any(self.a_nodes[i, j] != 0.0)}

    def is_laplacian(self) -> bool:
        d = self.grid.dim
        eye = np.eye(d).reshape((d, d) + (1,) * d)
        return (
            np.array_equal(self.a_nodes, np.broadcast_to(eye, self.a_nodes.shape))
            and all(np.all(f == 1.0) for f in self.a_faces)
            and not np.any(self.q)
        )


def check_ellipticity(coeffs: CoefficientField, grid: Grid | None = None) -> tuple[float, float]:
    """Extreme eigenvalues ``(c0, c1)`` of ``a(x)`` over all nodes.

    Raises EllipticityError with the offending node and a witness vector
    ``xi`` (with ``xi^T a xi <= 0``) when ``c0 <= 0``.
    """
    grid = grid or coeffs.grid
    if grid != coeffs.grid:
        raise GridMismatchError("coefficients were sampled on a different grid")
    d = grid.dim
    mats = np.moveaxis(coeffs.a_nodes.reshape(d, d, -1), 2, 0)
    lam, vec = np.linalg.eigh(mats)
    c0, c1 = float(lam[:, 0].min()), float(lam[:, -1].max())
    if c0 <= 0.0:
        k = int(np.argmin(lam[:, 0]))
        node = tuple(int(i) + 1 for i in np.unravel_index(k, grid.shape))
        raise EllipticityError(
            f"ellipticity fails at node {node}: smallest eigenvalue {lam[k, 0]:.6g}",
            node=node,
            xi=vec[k, :, 0],
            value=float(lam[k, 0]),
        )
    for i, f in enumerate(coeffs.a_faces):
        if np.any(f <= 0.0):
            k = np.unravel_index(int(np.argmin(f)), f.shape)
            raise EllipticityError(
                f"a_{i + 1}{i + 1} = {f[k]:.6g} <= 0 at face {k} along axis {i + 1}",
                node=k,
                xi=np.eye(d)[i],
                value=float(f[k]),
            )
    return c0, c1


@dataclass(eq=False)
class DiscreteOperator:
    """Linear map on grid functions.

    ``action`` works on arrays of shape ``grid.shape``; calling the operator
    on a GridFunction wraps it.  ``matrix`` is the assembled sparse form.
    """

    grid: Grid
    action: Callable[[np.ndarray], np.ndarray]
    symmetric: bool
    description: str
    build_matrix: Callable[[], sp.spmatrix] | None = None
    coeffs: CoefficientField | None = None
    meta: dict = field(default_factory=dict)

    def __call__(self, u: GridFunction) -> GridFunction:
        if u.grid != self.grid:
            raise GridMismatchError(f"operator on {self.grid} applied to function on {u.grid}")
        return GridFunction(self.grid, self.action(u.values))

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.action(np.asarray(values, dtype=float).reshape(self.grid.shape))

    def matvec(self, flat: np.ndarray) -> np.ndarray:
        return self.apply(flat).reshape(-1)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        if self.build_matrix is None:
            cols = [self.matvec(e) for e in np.eye(self.grid.size)]
            return sp.csr_matrix(np.array(cols).T)
        return sp.csr_matrix(self.build_matrix())

    def __repr__(self):
        return f"DiscreteOperator({self.description!r}, {self.grid.ident}, symmetric={self.symmetric})"


def _divergence_matrix(coeffs: CoefficientField) -> sp.csr_matrix:
    g = coeffs.grid
    mats = difference_matrices(g)
    out = sp.diags(coeffs.q.reshape(-1))
    for i in range(g.dim):
        f = mats["forward"][i]
        out = out + f.T @ sp.diags(coeffs.a_faces[i].reshape(-1)) @ f
    for (i, j), a in coeffs.mixed.items():
        ci, cj = mats["centered"][i], mats["centered"][j]
        w = sp.diags(a.reshape(-1))
        out = out + ci.T @ w @ cj + cj.T @ w @ ci
    return sp.csr_matrix(out)


def _laplacian_matrix(grid: Grid) -> sp.csr_matrix:
    mats = difference_matrices(grid)
    return sp.csr_matrix(sum(f.T @ f for f in mats["forward"]))


def assemble(coeffs: CoefficientField, grid: Grid | None = None) -> DiscreteOperator:
    """Flux-form discretization of ``-d_i(a_ij d_j u) + q u``."""
    grid = grid or coeffs.grid
    check_ellipticity(coeffs, grid)
    faces, mixed, q, h = coeffs.a_faces, coeffs.mixed, coeffs.q, grid.h

    def action(u):
        return kernels.div_form(u, faces, mixed, q, h)

    return DiscreteOperator(
        grid, action, True, "L0" if coeffs.is_laplacian() else "L", lambda: _divergence_matrix(coeffs), coeffs
    )


def assemble_laplacian(grid: Grid) -> DiscreteOperator:
    """The Dirichlet Laplacian ``L0 = -Delta`` with the standard (2 dim + 1)-point stencil."""
    h = grid.h
    return DiscreteOperator(
        grid,
        lambda u: kernels.laplacian(u, h),
        True,
        "L0",
        lambda: _laplacian_matrix(grid),
        CoefficientField.identity(grid),
    )


def _sample_vector_field(b, grid: Grid) -> list:
    coords = grid.coords()
    out = []
    if len(b) != grid.dim:
        raise ValueError(f"drift needs {grid.dim} components, got {len(b)}")
    for comp in b:
        if callable(comp):
            val = comp(*coords)
        else:
            val = comp
        arr = np.broadcast_to(np.asarray(val, dtype=float), grid.shape).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError("drift must be finite")
        out.append(arr)
    return out


def assemble_first_order(b, grid: Grid) -> DiscreteOperator:
    """``L' u = b . grad u`` with centered differences (generally non-symmetric)."""
    comps = _sample_vector_field(b, grid)
    h = grid.h
    active = [(i, c) for i, c in enumerate(comps) if np.any(c)]

    def action(u):
        out = np.zeros(grid.shape)
        for i, c in active:
            out += c * centered_difference(u, h, i)
        return out

    def build():
        mats = difference_matrices(grid)
        out = sp.csr_matrix((grid.size, grid.size))
        for i, c in active:
            out = out + sp.diags(c.reshape(-1)) @ mats["centered"][i]
        return out

    op = DiscreteOperator(grid, action, not active, "L'", build)
    op.meta["drift"] = comps
    return op


def homotopy(L0: DiscreteOperator, L: DiscreteOperator, s: float) -> DiscreteOperator:
    """``L_s = L0 + s (L - L0)``."""
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"homotopy parameter must lie in [0, 1], got {s}")
    if L0.grid != L.grid:
        raise GridMismatchError("homotopy endpoints live on different grids")

    def action(u):
        a = L0.action(u)
        return a + s * (L.action(u) - a)

    def build():
        return L0.matrix + s * (L.matrix - L0.matrix)

    op = DiscreteOperator(L0.grid, action, L0.symmetric and L.symmetric, f"L_s(s={s:g})", build)
    op.meta.update(endpoints=(L0, L), s=s)
    return op


def difference(L: DiscreteOperator, M: DiscreteOperator, scale: float = 1.0) -> DiscreteOperator:
    """``scale * (L - M)``."""
    if L.grid != M.grid:
        raise GridMismatchError("operands live on different grids")

    def action(u):
        return scale * (L.action(u) - M.action(u))

    return DiscreteOperator(
        L.grid,
        action,
        L.symmetric and M.symmetric,
        f"{scale:g}*({L.description}-{M.description})",
        lambda: scale * (L.matrix - M.matrix),
    )


def scaled(L: DiscreteOperator, alpha: float) -> DiscreteOperator:
    return DiscreteOperator(
        L.grid, lambda u: alpha * L.action(u), L.symmetric, f"{alpha:g}*{L.description}", lambda: alpha * L.matrix
    )


def add(L: DiscreteOperator, M: DiscreteOperator) -> DiscreteOperator:
    if L.grid != M.grid:
        raise GridMismatchError("operands live on different grids")
    return DiscreteOperator(
        L.grid,
        lambda u: L.action(u) + M.action(u),
        L.symmetric and M.symmetric,
        f"{L.description}+{M.description}",
        lambda: L.matrix + M.matrix,
    )


def export_triplets(op: DiscreteOperator, path) -> None:
    """Write the assembled matrix as ``row col value`` lines (0-based, row-major order)."""
    coo = sp.coo_matrix(op.matrix)
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}"]
    lines += [f"{coo.row[k]} {coo.col[k]} {coo.data[k]:.17g}" for k in order]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def manufactured_rhs(coeffs: CoefficientField, u_star, drift=None) -> GridFunction:
    """``f = -d_i(a_ij d_j u*) + q u* (+ b . grad u*)`` from closed forms.

    Needs ``coeffs`` built by ``from_functions`` and catalog functions for
    ``u*`` (and for callable drift components).
    """
    if coeffs.functions is None:
        raise ValueError("manufactured data needs coefficients given as catalog functions")
    grid = coeffs.grid
    x = grid.coords()
    d = grid.dim
    fn = coeffs.functions
    gu = u_star.gradient(*x)
    hu = u_star.hessian(*x)
    out = fn["q"](*x) * u_star(*x)
    for i in range(d):
        for j in range(d):
            a = fn[(min(i, j), max(i, j))]
            out = out - a.gradient(*x)[i] * gu[j] - a(*x) * hu[i][j]
    if drift is not None:
        for i, b in enumerate(drift):
            out = out + (b(*x) if callable(b) else b) * gu[i]
    return GridFunction(grid, np.broadcast_to(out, grid.shape))
