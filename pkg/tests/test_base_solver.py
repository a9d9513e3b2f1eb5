import numpy as np
import pytest

from elliptic_continuation.base_solver import (
    ConvergenceError,
    SingularSystemError,
    factorize,
    relative_residual,
    solve_direct,
    solve_laplacian,
)
from elliptic_continuation.catalog import Bubble, Polynomial, Sine
from elliptic_continuation.grid import GridFunction, make_grid, norm_h0
from elliptic_continuation.operators import (
    CoefficientField,
    assemble,
    assemble_laplacian,
    manufactured_rhs,
)
from oracles import dense_flux_operator, discrete_laplacian_eigenvalue


def sine_mode(g):
    return g.sample(lambda *x: np.prod([np.sin(np.pi * t) for t in x], axis=0))


@pytest.mark.parametrize("dim,n", [(2, 31), (2, 64), (3, 15)])
def test_eigenpair_recovered(dim, n):
    g = make_grid(dim, n)
    u = sine_mode(g)
    f = discrete_laplacian_eigenvalue(g.h, (1,) * dim) * u
    got = solve_laplacian(f, rtol=1e-12)
    assert norm_h0(got - u) <= 1e-9 * norm_h0(u)
    assert norm_h0(solve_direct(assemble_laplacian(g), f) - u) <= 1e-9 * norm_h0(u)


def test_zero_rhs(grid2):
    assert not np.any(solve_laplacian(grid2.zeros()).values)
    assert not np.any(solve_direct(assemble_laplacian(grid2), grid2.zeros()).values)


@pytest.mark.parametrize("rtol", [0.0, -1e-3, 0.5])
def test_rtol_out_of_range(grid2, rtol):
    with pytest.raises(ValueError):
        solve_laplacian(GridFunction(grid2, np.ones(grid2.shape)), rtol)


def test_iteration_cap_reports_residual(monkeypatch, grid2):
    import elliptic_continuation.base_solver as bs

    monkeypatch.setattr(bs, "cg_iteration_cap", lambda g: 2)
    with pytest.raises(ConvergenceError) as info:
        bs.solve_laplacian(grid2.random(np.random.default_rng(0)), 1e-10)
    assert info.value.residual > 1e-10


@pytest.mark.parametrize("rtol", [1e-6, 1e-10])
def test_solve_meets_residual_contract(grid3, rng, rtol):
    L0 = assemble_laplacian(grid3)
    for _ in range(10):
        f = grid3.random(rng)
        assert relative_residual(L0, solve_laplacian(f, rtol), f) <= rtol


@pytest.mark.parametrize("dim,n", [(2, 15), (3, 7)])
def test_iterative_and_direct_agree(dim, n, rng):
    g = make_grid(dim, n)
    L0 = assemble_laplacian(g)
    rtol = 1e-10
    for _ in range(50):
        f = g.random(rng)
        a = solve_laplacian(f, rtol)
        b = solve_direct(L0, f)
        assert norm_h0(a - b) <= max(rtol, 1e-8) * norm_h0(b)


def test_solve_is_linear(grid2, rng):
    rtol = 1e-10
    f, g = grid2.random(rng), grid2.random(rng)
    lhs = solve_laplacian(2.0 * f + (-0.5) * g, rtol)
    rhs = 2.0 * solve_laplacian(f, rtol) - 0.5 * solve_laplacian(g, rtol)
    assert norm_h0(lhs - rhs) <= 10 * rtol * norm_h0(rhs)


def test_shifted_laplacian_on_3x3_against_eigendecomposition(rng):
    g = make_grid(2, 3)
    dense = dense_flux_operator(3, 2, lambda i, j, x: float(i == j), lambda x: 1.0)
    w, V = np.linalg.eigh(dense)
    f = g.random(rng)
    want = V @ ((V.T @ f.flat) / w)
    got = solve_direct(assemble(CoefficientField.identity(g, 1.0)), f)
    assert np.allclose(got.flat, want, rtol=1e-12, atol=1e-14)


def test_singular_system_detected():
    g = make_grid(2, 7)
    lam = discrete_laplacian_eigenvalue(g.h, (1, 1))
    L = assemble(CoefficientField.identity(g, -lam))
    with pytest.raises(SingularSystemError):
        factorize(L)
    with pytest.raises(SingularSystemError):
        solve_direct(L, GridFunction(g, np.ones(g.shape)))


def test_direct_residual_small(rng):
    g = make_grid(2, 31)
    c = CoefficientField.from_functions(g, {(0, 0): Sine(1, 0.5, 1, 0), (0, 1): 0.3}, Polynomial(1, (1.0, 1.0)))
    L = assemble(c)
    f = g.random(rng)
    assert relative_residual(L, solve_direct(L, f), f) <= 1e-10


@pytest.mark.parametrize("mixed", [0.0, 0.3])
def test_second_order_refinement(mixed):
    a = {(0, 0): Sine(1, 0.5, 1, 0)}
    if mixed:
        a[(0, 1)] = mixed
    errs = []
    for n in (15, 31, 63, 127):
        g = make_grid(2, n)
        c = CoefficientField.from_functions(g, a, Polynomial(1, (1.0, 1.0)))
        u = solve_direct(assemble(c), manufactured_rhs(c, Bubble()))
        errs.append(norm_h0(u - g.sample(Bubble())))
    ratios = [errs[k] / errs[k + 1] for k in range(len(errs) - 1)]
    assert all(3.5 <= r <= 4.5 for r in ratios), ratios
