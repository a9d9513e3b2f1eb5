"""Uniform box grids, grid functions with zero Dirichlet trace, and discrete Sobolev norms.

Grid functions live on the interior nodes of the unit box ``[0, 1]^dim``; the
boundary values are implicitly zero.  Arrays are stored with shape
``(n,) * dim`` in C order, so flattening gives the canonical lexicographic
node order used for every reduction in this package.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GridMismatchError(ValueError):
    """Two grid functions were combined on different grids."""


@dataclass(frozen=True)
class Grid:
    dim: int
    n_per_axis: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.n_per_axis < 3:
            raise ValueError(f"n_per_axis must be >= 3, got {self.n_per_axis}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_per_axis + 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.n_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def ident(self) -> str:
        return f"{self.dim}d-n{self.n_per_axis}"

    def axis_coords(self) -> np.ndarray:
        """Interior node coordinates along one axis."""
        return self.h * np.arange(1, self.n_per_axis + 1)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays of all interior nodes, each of shape ``self.shape``."""
        x = self.axis_coords()
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def face_coords(self, axis: int) -> tuple[np.ndarray, ...]:
        """Coordinates of the face midpoints normal to ``axis``.

        There are ``n + 1`` faces along ``axis`` (at ``(k + 1/2) h``) and the
        interior node positions along the other axes.
        """
        x = self.axis_coords()
        faces = self.h * (np.arange(self.n_per_axis + 1) + 0.5)
        axes = [faces if k == axis else x for k in range(self.dim)]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def boundary_distance(self) -> np.ndarray:
        """Distance from each interior node to the box surface."""
        c = self.coords()
        return np.minimum.reduce([np.minimum(x, 1.0 - x) for x in c])

    def sample(self, func) -> "GridFunction":
        return GridFunction(self, np.asarray(func(*self.coords()), dtype=float))

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.shape))

    def random(self, rng: np.random.Generator) -> "GridFunction":
        return GridFunction(self, rng.standard_normal(self.shape))

    @cached_property
    def _diff_matrices(self):
        return _difference_matrices(self)


def make_grid(dim: int, n_per_axis: int) -> Grid:
    return Grid(int(dim), int(n_per_axis))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real values on the interior nodes of ``grid``; zero on the boundary."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.size == self.grid.size and vals.shape != self.grid.shape:
            vals = vals.reshape(self.grid.shape)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values of shape {vals.shape} do not fit grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def at(self, index) -> float:
        """Value at a node given in padded indexing (0 and n+1 are boundary nodes)."""
        index = tuple(int(i) for i in index)
        if len(index) != self.grid.dim:
            raise IndexError("index has wrong length")
        n = self.grid.n_per_axis
        if any(i < 0 or i > n + 1 for i in index):
            raise IndexError(f"{index} is outside the closed box")
        if any(i in (0, n + 1) for i in index):
            return 0.0
        return float(self.values[tuple(i - 1 for i in index)])

    def _check(self, other):
        if not isinstance(other, GridFunction):
            return NotImplemented
        if other.grid != self.grid:
            raise GridMismatchError(f"{self.grid} vs {other.grid}")
        return other

    def __add__(self, other):
        other = self._check(other)
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other):
        other = self._check(other)
        return GridFunction(self.grid, self.values - other.values)

    def __mul__(self, alpha):
        return GridFunction(self.grid, float(alpha) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)


def _same_grid(u: GridFunction, v: GridFunction):
    if u.grid != v.grid:
        raise GridMismatchError(f"{u.grid} vs {v.grid}")


def inner(u: GridFunction, v: GridFunction) -> float:
    """Discrete L2 inner product ``h^dim * sum(u v)`` in canonical node order."""
    _same_grid(u, v)
    # plain left-to-right accumulation: swapping u and v gives the same bits
    prod = u.flat * v.flat
    return u.grid.cell_volume * float(np.add.reduce(prod, dtype=np.float64))


def norm_h0(u: GridFunction) -> float:
    return float(np.sqrt(inner(u, u)))


def _pad_axis(a: np.ndarray, axis: int) -> np.ndarray:
    width = [(1, 1) if k == axis else (0, 0) for k in range(a.ndim)]
    return np.pad(a, width)


def forward_differences(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Edge differences along ``axis`` including the two boundary edges (n + 1 values)."""
    return np.diff(_pad_axis(a, axis), axis=axis) / h


def centered_difference(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    p = _pad_axis(a, axis)
    sl_hi = [slice(None)] * a.ndim
    sl_lo = [slice(None)] * a.ndim
    sl_hi[axis] = slice(2, None)
    sl_lo[axis] = slice(None, -2)
    return (p[tuple(sl_hi)] - p[tuple(sl_lo)]) / (2.0 * h)


def second_difference(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    p = _pad_axis(a, axis)
    n = a.shape[axis]
    hi = [slice(None)] * a.ndim
    mid = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis], mid[axis], lo[axis] = slice(2, n + 2), slice(1, n + 1), slice(0, n)
    return (p[tuple(hi)] - 2.0 * p[tuple(mid)] + p[tuple(lo)]) / h**2


def _sumsq(a: np.ndarray) -> float:
    return float(np.add.reduce((a * a).reshape(-1), dtype=np.float64))


def gradient_energy(u: GridFunction) -> float:
    """Discrete Dirichlet energy ``int |grad u|^2`` over all grid edges.

    Uses forward differences across every edge, including the edges that
    touch the boundary, so it coincides with ``inner(L0 u, u)`` for the
    five/seven point Laplacian.
    """
    g = u.grid
    return g.cell_volume * sum(_sumsq(forward_differences(u.values, g.h, k)) for k in range(g.dim))


def second_derivative_energy(u: GridFunction) -> float:
    """``int |D^2 u|^2`` with each unordered pair ``(i, j), i <= j`` counted once."""
    g = u.grid
    total = 0.0
    for i in range(g.dim):
        total += _sumsq(second_difference(u.values, g.h, i))
        d_i = centered_difference(u.values, g.h, i)
        for j in range(i + 1, g.dim):
            total += _sumsq(centered_difference(d_i, g.h, j))
    return g.cell_volume * total


def norm_h1(u: GridFunction) -> float:
    return float(np.sqrt(inner(u, u) + gradient_energy(u)))


def norm_h2(u: GridFunction) -> float:
    return float(np.sqrt(inner(u, u) + gradient_energy(u) + second_derivative_energy(u)))


# -- sparse forms of the same difference operators ---------------------------


def _kron_axis(mat_1d: sp.spmatrix, axis: int, dim: int, n: int) -> sp.csr_matrix:
    eye = sp.identity(n, format="csr")
    out = None
    for k in range(dim):
        factor = mat_1d if k == axis else eye
        out = factor if out is None else sp.kron(out, factor, format="csr")
    return sp.csr_matrix(out)


def _difference_matrices(grid: Grid) -> dict:
    n, h, d = grid.n_per_axis, grid.h, grid.dim
    fwd = sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n)) / h
    cen = sp.diags([np.ones(n - 1), -np.ones(n - 1)], [1, -1], shape=(n, n)) / (2 * h)
    sec = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], shape=(n, n)) / h**2
    return {
        "forward": [_kron_axis(fwd, k, d, n) for k in range(d)],
        "centered": [_kron_axis(cen, k, d, n) for k in range(d)],
        "second": [_kron_axis(sec, k, d, n) for k in range(d)],
    }


def difference_matrices(grid: Grid) -> dict:
    """Sparse forward/centered/second difference matrices per axis (zero Dirichlet extension)."""
    return grid._diff_matrices


def sobolev_gram(grid: Grid, order: int = 2) -> sp.csr_matrix:
    """Gram matrix ``G`` with ``norm_h{order}(u)**2 == u.flat @ G @ u.flat``."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    mats = difference_matrices(grid)
    g = sp.identity(grid.size, format="csr")
    if order >= 1:
        for f in mats["forward"]:
            g = g + f.T @ f
    if order == 2:
        for i in range(grid.dim):
            g = g + mats["second"][i].T @ mats["second"][i]
            for j in range(i + 1, grid.dim):
                m = mats["centered"][j] @ mats["centered"][i]
                g = g + m.T @ m
    return sp.csr_matrix(grid.cell_volume * g)


# -- plain-text field dumps ------------------------------------------------------


def dump_field(u: GridFunction, path) -> None:
    g = u.grid
    lines = [f"{g.dim} {g.n_per_axis} {g.h!r}"]
    lines.extend(format(float(v), ".17g") for v in u.flat)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_field(path) -> GridFunction:
    text = Path(path).read_text(encoding="utf-8").split("\n")
    header = text[0].split()
    if len(header) != 3:
        raise ValueError(f"{path}: bad header {text[0]!r}")
    grid = make_grid(int(header[0]), int(header[1]))
    if abs(float(header[2]) - grid.h) > 1e-15:
        raise ValueError(f"{path}: spacing {header[2]} inconsistent with n={grid.n_per_axis}")
    vals = np.array([float(s) for s in text[1:] if s.strip()])
    if vals.size != grid.size:
        raise ValueError(f"{path}: expected {grid.size} values, found {vals.size}")
    return GridFunction(grid, vals.reshape(grid.shape))
