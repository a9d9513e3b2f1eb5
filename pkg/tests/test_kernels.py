import os
import subprocess
import sys

import numpy as np
import pytest

from elliptic_continuation import _kernels
from elliptic_continuation._kernels import numba_kernels, numpy_kernels
from elliptic_continuation.catalog import Sine
from elliptic_continuation.grid import make_grid
from elliptic_continuation.mollifier import deep_interior, make_kernel
from elliptic_continuation.operators import CoefficientField

pytestmark = pytest.mark.skipif(numba_kernels is None, reason="numba not importable")

GRIDS = [(2, 15), (2, 32), (3, 7)]


@pytest.mark.parametrize("dim,n", GRIDS)
def test_laplacian_paths_agree(dim, n, rng):
    g = make_grid(dim, n)
    u = rng.standard_normal(g.shape)
    a = numpy_kernels.laplacian(u, g.h)
    b = numba_kernels.laplacian(u, g.h)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-13 * np.abs(a).max())


@pytest.mark.parametrize("dim,n", GRIDS)
@pytest.mark.parametrize("mixed", [0.0, 0.2])
def test_div_form_paths_agree(dim, n, mixed, rng):
    g = make_grid(dim, n)
    a = {(0, 0): Sine(1, 0.5, 1, 0)}
    if mixed:
        a[(0, 1)] = mixed
    c = CoefficientField.from_functions(g, a, 2.0)
    u = rng.standard_normal(g.shape)
    x = numpy_kernels.div_form(u, c.a_faces, c.mixed, c.q, g.h)
    y = numba_kernels.div_form(u, c.a_faces, c.mixed, c.q, g.h)
    assert np.allclose(x, y, rtol=1e-13, atol=1e-13 * np.abs(x).max())


@pytest.mark.parametrize("dim,n", GRIDS)
def test_cg_paths_agree(dim, n, rng):
    g = make_grid(dim, n)
    b = rng.standard_normal(g.shape)
    xs = []
    for k in (numpy_kernels, numba_kernels):
        x = np.zeros(g.shape)
        k.cg_laplacian(b, x, g.h, 1e-12, 2000)
        xs.append(x)
    assert np.allclose(xs[0], xs[1], rtol=1e-9, atol=1e-9 * np.abs(xs[0]).max())
    r = b - numpy_kernels.laplacian(xs[1], g.h)
    assert np.linalg.norm(r) <= 1e-11 * np.linalg.norm(b)


@pytest.mark.parametrize("dim,n,eps", [(2, 31, 0.1), (2, 63, 0.2), (3, 15, 0.2)])
def test_correlate_paths_agree(dim, n, eps, rng):
    g = make_grid(dim, n)
    u = rng.standard_normal(g.shape)
    w = make_kernel(g, eps).weights * g.cell_volume
    mask = deep_interior(g, eps)
    a = numpy_kernels.correlate_masked(u, w, mask)
    b = numba_kernels.correlate_masked(u, w, mask)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-14)
    assert not np.any(a[~mask])


def test_correlate_against_direct_sum(rng):
    g = make_grid(2, 21)
    u = rng.standard_normal(g.shape)
    w = make_kernel(g, 0.15).weights
    r = w.shape[0] // 2
    mask = deep_interior(g, 0.15)
    got = numpy_kernels.correlate_masked(u, w, mask)
    for i, j in np.argwhere(mask)[:20]:
        want = sum(
            w[a + r, b + r] * u[i + a, j + b]
            for a in range(-r, r + 1)
            for b in range(-r, r + 1)
            if 0 <= i + a < 21 and 0 <= j + b < 21
        )
        assert got[i, j] == pytest.approx(want, rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("value,expected", [("0", "numpy"), ("off", "numpy"), ("False", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(value, expected):
    env = dict(os.environ, **{_kernels.ENV_FLAG: value})
    out = subprocess.run(
        [sys.executable, "-c", "from elliptic_continuation._kernels import kernels; print(kernels.backend)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
