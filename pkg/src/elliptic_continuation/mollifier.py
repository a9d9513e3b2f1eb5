"""Smooth compactly supported averaging kernels and the orthogonality probe.

``mollify`` convolves a grid function with the radial bump
``exp(-1 / (1 - |x/eps|^2))`` (renormalized so its discrete integral is one)
and keeps the result only on nodes farther than ``eps`` from the boundary,
where the whole kernel support sees interior nodes.

``orthogonality_probe`` returns the gradient energy of the mollified
function.  If ``h`` is orthogonal to ``L0 u`` for every ``u`` that is itself a
mollifier centred at a deep interior node, then ``w_eps * h`` vanishes there
and so does the probe.  Discretely, orthogonality to the whole range of an
invertible ``L0`` already forces ``h = 0`` by linear algebra, so the probe
demonstrates the mechanism on deliberately rank-deficient operators
(``rank_deficient_witness``); it proves nothing on its own.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ._kernels import kernels
from .grid import Grid, GridFunction, gradient_energy, norm_h0


class MollifierError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MollifierKernel:
    """Bump weights on the node offsets within distance ``epsilon`` of the origin."""

    epsilon: float
    grid: Grid
    weights: np.ndarray = field(repr=False)

    @property
    def radius(self) -> int:
        return self.weights.shape[0] // 2

    def integral(self) -> float:
        return float(self.weights.sum() * self.grid.cell_volume)

    def at_node(self, index) -> np.ndarray:
        """The kernel centred at the interior node ``index`` as a full grid array."""
        g = self.grid
        r = self.radius
        out = np.zeros(g.shape)
        src = []
        dst = []
        for k, i in enumerate(index):
            lo, hi = i - r, i + r + 1
            dst.append(slice(max(lo, 0), min(hi, g.n_per_axis)))
            src.append(slice(max(lo, 0) - lo, self.weights.shape[k] - (hi - min(hi, g.n_per_axis))))
        out[tuple(dst)] = self.weights[tuple(src)]
        return out


def _check_epsilon(grid: Grid, epsilon: float):
    if not grid.h < epsilon < 0.5:
        raise MollifierError(f"epsilon must satisfy h = {grid.h:.6g} < epsilon < 0.5, got {epsilon}")


@lru_cache(maxsize=32)
def _kernel_cached(grid: Grid, epsilon: float) -> MollifierKernel:
    r = int(np.ceil(epsilon / grid.h))
    offs = np.arange(-r, r + 1) * grid.h
    mesh = np.meshgrid(*([offs] * grid.dim), indexing="ij")
    rho2 = sum(m**2 for m in mesh) / epsilon**2
    w = np.zeros_like(rho2)
    inside = rho2 < 1.0
    w[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
    w /= w.sum() * grid.cell_volume
    w.setflags(write=False)
    return MollifierKernel(float(epsilon), grid, w)


def make_kernel(grid: Grid, epsilon: float) -> MollifierKernel:
    _check_epsilon(grid, epsilon)
    return _kernel_cached(grid, float(epsilon))


def deep_interior(grid: Grid, epsilon: float) -> np.ndarray:
    """Nodes whose distance to the boundary exceeds ``epsilon``."""
    return grid.boundary_distance() > epsilon


def mollify(h: GridFunction, epsilon: float) -> GridFunction:
    """``(w_eps * h)`` on the deep interior, zero in the boundary band."""
    grid = h.grid
    kern = make_kernel(grid, epsilon)
    if not np.any(h.values):
        return grid.zeros()
    mask = deep_interior(grid, epsilon)
    out = kernels.correlate_masked(h.values, kern.weights * grid.cell_volume, mask)
    return GridFunction(grid, out)


def mollification_error(h: GridFunction, epsilon: float) -> float:
    return norm_h0(mollify(h, epsilon) - h)


def orthogonality_probe(h: GridFunction, epsilon: float) -> float:
    return gradient_energy(mollify(h, epsilon))


def rank_deficient_witness(grid: Grid, epsilon: float, rank: int = 4, seed: int = 0):
    """A rank-deficient operator and a residual direction orthogonal to its range.

    ``T = L0 Q Q^T`` where ``Q`` spans the ``L0``-preimages of the kernels
    centred at every deep interior node plus random directions, ``rank``
    columns in total.  The least-squares residual ``h`` of ``T x = f`` for
    random ``f`` lies in the orthogonal complement of the range of ``T``,
    hence is orthogonal to every such kernel, so ``w_eps * h`` vanishes.

    Returns ``(T, h)`` with ``T`` dense.
    """
    from .operators import assemble_laplacian

    kern = make_kernel(grid, epsilon)
    L0 = assemble_laplacian(grid).matrix.toarray()
    centres = np.argwhere(deep_interior(grid, epsilon))
    if len(centres) >= rank:
        raise MollifierError(f"rank {rank} leaves no room beyond the {len(centres)} kernel preimages")
    cols = [np.linalg.solve(L0, kern.at_node(tuple(c)).ravel()) for c in centres]
    rng = np.random.default_rng(seed)
    cols += [rng.standard_normal(grid.size) for _ in range(rank - len(cols))]
    Q, _ = np.linalg.qr(np.column_stack(cols))
    T = L0 @ Q @ Q.T
    f = rng.standard_normal(grid.size)
    x, *_ = np.linalg.lstsq(T, f, rcond=None)
    return T, GridFunction(grid, (f - T @ x).reshape(grid.shape))
