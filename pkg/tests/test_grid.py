import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elliptic_continuation.grid import (
    GridFunction,
    GridMismatchError,
    dump_field,
    gradient_energy,
    inner,
    load_field,
    make_grid,
    norm_h0,
    norm_h1,
    norm_h2,
    sobolev_gram,
)
from oracles import dense_h2_gram, sine_product_integrals


def sine_product(g):
    return g.sample(lambda *x: np.prod([np.sin(np.pi * t) for t in x], axis=0))


@pytest.mark.parametrize("dim,n,count,h", [(2, 3, 9, 0.25), (3, 3, 27, 0.25), (2, 127, 16129, 1 / 128)])
def test_make_grid_counts(dim, n, count, h):
    g = make_grid(dim, n)
    assert g.size == count
    assert g.h == h
    assert g.h * (n + 1) == 1.0


@pytest.mark.parametrize("dim,n", [(1, 5), (4, 5), (2, 2), (3, 0)])
def test_make_grid_rejects(dim, n):
    with pytest.raises(ValueError):
        make_grid(dim, n)


def test_boundary_values_are_zero(grid2, rng):
    u = grid2.random(rng)
    n = grid2.n_per_axis
    assert u.at((0, 5)) == 0.0
    assert u.at((n + 1, 3)) == 0.0
    assert u.at((1, 1)) == u.values[0, 0]


def test_gridfunction_rejects_nonfinite(grid2):
    bad = np.zeros(grid2.shape)
    bad[2, 2] = np.nan
    with pytest.raises(ValueError):
        GridFunction(grid2, bad)


def test_inner_examples(grid2, rng):
    v = grid2.random(rng)
    assert inner(grid2.zeros(), v) == 0.0
    one = GridFunction(grid2, np.ones(grid2.shape))
    assert inner(one, one) == pytest.approx(grid2.h**2 * grid2.size, rel=1e-15)
    assert norm_h0(one) == pytest.approx(np.sqrt(grid2.h**2 * grid2.size), rel=1e-15)


def test_inner_swap_is_bit_identical(grid2, rng):
    u, v = grid2.random(rng), grid2.random(rng)
    assert inner(u, v) == inner(v, u)


def test_inner_grid_mismatch(rng):
    with pytest.raises(GridMismatchError):
        inner(make_grid(2, 5).random(rng), make_grid(2, 7).random(rng))


def test_sine_product_limits():
    h0, grad, hess = sine_product_integrals()
    assert h0 == pytest.approx(0.25)
    assert grad == pytest.approx(np.pi**2 / 2)
    assert hess == pytest.approx(3 * np.pi**4 / 4)
    errs = []
    for n in (31, 63, 127):
        u = sine_product(make_grid(2, n))
        errs.append((abs(norm_h0(u) ** 2 - h0), abs(gradient_energy(u) - grad), abs(norm_h2(u) ** 2 - (h0 + grad + hess))))
    # the trapezoid sum of sin^2 is exact on these grids
    assert max(e[0] for e in errs) < 1e-13
    for k in (1, 2):
        assert errs[2][k] < errs[1][k] < errs[0][k]
    u = sine_product(make_grid(2, 127))
    assert norm_h0(u) ** 2 == pytest.approx(h0, rel=1e-12)
    assert gradient_energy(u) == pytest.approx(grad, rel=1e-4)
    # the mixed-derivative sum omits boundary nodes where d_xy u does not vanish,
    # so the H2 term converges at first order; extrapolate before comparing
    coarse = norm_h2(sine_product(make_grid(2, 127))) ** 2
    fine = norm_h2(sine_product(make_grid(2, 255))) ** 2
    assert 2 * fine - coarse == pytest.approx(h0 + grad + hess, rel=1e-4)


def test_zero_norms(grid2):
    z = grid2.zeros()
    assert norm_h2(z) == 0.0 and gradient_energy(z) == 0.0


@pytest.mark.parametrize("dim,n", [(2, 4), (2, 6), (3, 3)])
def test_sobolev_gram_matches_dense_oracle(dim, n):
    g = make_grid(dim, n)
    assert np.allclose(sobolev_gram(g, 2).toarray(), dense_h2_gram(n, dim), rtol=1e-13, atol=0)


def test_gram_matches_norm(grid3, rng):
    u = grid3.random(rng)
    for order, fn in ((0, norm_h0), (1, norm_h1), (2, norm_h2)):
        assert u.flat @ sobolev_gram(grid3, order) @ u.flat == pytest.approx(fn(u) ** 2, rel=1e-12)


def test_gradient_energy_equals_laplacian_form(grid2, rng):
    from elliptic_continuation.operators import assemble_laplacian

    u = grid2.random(rng)
    assert gradient_energy(u) == pytest.approx(inner(assemble_laplacian(grid2)(u), u), rel=1e-12)


def test_norm_ordering_on_random_functions(rng):
    g = make_grid(2, 9)
    for _ in range(1000):
        u = GridFunction(g, rng.standard_normal(g.shape) * rng.uniform(1e-3, 1e3))
        assert norm_h0(u) <= norm_h1(u) <= norm_h2(u)


@given(
    st.integers(2, 3),
    st.integers(3, 8),
    st.integers(0, 2**32 - 1),
)
def test_norms_are_positive_definite(dim, n, seed):
    g = make_grid(dim, n)
    u = g.random(np.random.default_rng(seed))
    assert gradient_energy(u) > 0
    assert norm_h0(u) <= norm_h1(u) <= norm_h2(u)
    assert norm_h2(2.5 * u) == pytest.approx(2.5 * norm_h2(u), rel=1e-13)


def test_poincare_constant_bounded_under_refinement():
    # sup ||u||_0^2 / |grad u|^2 is 1 / lambda_min, which decreases to 1 / (2 pi^2)
    from oracles import discrete_laplacian_eigenvalue

    cps = []
    for n in (7, 15, 31, 63):
        h = 1 / (n + 1)
        cps.append(1 / np.sqrt(discrete_laplacian_eigenvalue(h, (1, 1))))
        u = sine_product(make_grid(2, n))
        assert norm_h0(u) <= cps[-1] * np.sqrt(gradient_energy(u)) * (1 + 1e-12)
    assert all(b < a for a, b in zip(cps, cps[1:]))
    assert cps[-1] > 1 / np.sqrt(2 * np.pi**2)


def test_field_dump_round_trip(tmp_path, grid3, rng):
    u = grid3.random(rng)
    path = tmp_path / "u.txt"
    dump_field(u, path)
    header = path.read_text().splitlines()[0].split()
    assert header[:2] == ["3", "7"]
    v = load_field(path)
    assert v.grid == grid3
    assert np.array_equal(v.values, u.values)
