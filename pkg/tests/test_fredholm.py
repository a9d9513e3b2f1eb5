import numpy as np
import pytest
from scipy.optimize import brentq

from elliptic_continuation.base_solver import solve_direct
from elliptic_continuation.catalog import Bubble, Polynomial, Sine
from elliptic_continuation.continuation import ContinuationConfig, continuation_solve
from elliptic_continuation.fredholm import (
    FredholmAlternativeError,
    FredholmConfig,
    compactness_proxy,
    fredholm_check,
    gmres,
    solve_perturbed,
)
from elliptic_continuation.grid import GridFunction, make_grid, norm_h0
from elliptic_continuation.operators import (
    CoefficientField,
    add,
    assemble,
    assemble_first_order,
    assemble_laplacian,
)
from oracles import dense_drift_operator


@pytest.fixture(scope="module")
def g31():
    return make_grid(2, 31)


def var_diag(g):
    return CoefficientField.from_functions(g, {(0, 0): Sine(1.0, 0.5, 1.0, 0)}, Polynomial(1, (1.0, 1.0)))


def test_gmres_on_nonsymmetric_matrix(rng):
    n = 60
    A = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
    b = rng.standard_normal(n)
    res = gmres(lambda v: A @ v, b, rtol=1e-12, restart=10, max_iters=300)
    assert res.converged
    assert np.linalg.norm(A @ res.x - b) <= 1e-11 * np.linalg.norm(b)
    assert np.allclose(res.x, np.linalg.solve(A, b), rtol=1e-9)


def test_gmres_zero_rhs():
    res = gmres(lambda v: 2 * v, np.zeros(5))
    assert res.converged and res.iterations == 0 and not np.any(res.x)


def test_zero_perturbation_matches_continuation(g31, rng):
    c = var_diag(g31)
    L = assemble(c)
    f = g31.random(rng)
    u_cont, _ = continuation_solve(c, f)
    u = solve_perturbed(L, assemble_first_order((0.0, 0.0), g31), f, FredholmConfig(inner="continuation"))
    assert norm_h0(u - u_cont) <= 1e-9 * norm_h0(u_cont)


def test_small_drift_matches_dense_oracle(g31, rng):
    L = assemble_laplacian(g31)
    Lp = assemble_first_order((0.1, 0.0), g31)
    f = g31.random(rng)
    dense = L.matrix.toarray() + dense_drift_operator(31, 2, lambda i, x: 0.1 if i == 0 else 0.0)
    want = np.linalg.solve(dense, f.flat)
    u, info = solve_perturbed(L, Lp, f, return_info=True)
    assert np.linalg.norm(u.flat - want) <= 1e-7 * np.linalg.norm(want)
    assert info["residual"] <= 1e-8


def test_manufactured_recovery_with_variable_operator(g31):
    L = assemble(var_diag(g31))
    Lp = assemble_first_order((lambda x, y: 2.0 * y, lambda x, y: -1.0 + x), g31)
    u_star = g31.sample(Bubble())
    f = add(L, Lp)(u_star)
    u = solve_perturbed(L, Lp, f)
    assert norm_h0(u - u_star) <= 1e-8 * norm_h0(u_star)


def test_large_drift_converges_where_picard_would_not(g31, rng):
    L = assemble_laplacian(g31)
    Lp = assemble_first_order((40.0, 0.0), g31)
    f = g31.random(rng)
    A = np.linalg.solve(L.matrix.toarray(), Lp.matrix.toarray())
    assert np.max(np.abs(np.linalg.eigvals(A))) > 1.0
    u, info = solve_perturbed(L, Lp, f, FredholmConfig(inner="direct"), return_info=True)
    ref = solve_direct(add(L, Lp), f)
    assert norm_h0(u - ref) <= 1e-7 * norm_h0(ref)
    assert info["residual"] <= 1e-8


def test_zero_rhs(g31):
    u = solve_perturbed(assemble_laplacian(g31), assemble_first_order((1.0, 0.0), g31), g31.zeros())
    assert not np.any(u.values)


def test_check_identity_for_zero_perturbation():
    g = make_grid(2, 15)
    rep = fredholm_check(assemble(var_diag(g)), assemble_first_order((0.0, 0.0), g))
    assert rep.sigma_min == pytest.approx(1.0, abs=1e-10)
    assert rep.unique


def dense_sigma_min(L, Lp):
    A = np.linalg.solve(L.matrix.toarray(), Lp.matrix.toarray())
    return np.linalg.svd(np.eye(A.shape[0]) + A, compute_uv=False)[-1]


def test_check_small_drift_band():
    g = make_grid(2, 15)
    L = assemble_laplacian(g)
    devs = []
    for b in (1e-3, 1e-2, 1e-1):
        Lp = assemble_first_order((b, 0.0), g)
        rep = fredholm_check(L, Lp)
        assert rep.sigma_min == pytest.approx(dense_sigma_min(L, Lp), rel=1e-8)
        devs.append(abs(1.0 - rep.sigma_min) / b)
    # the deviation from one scales linearly in |b|: the ratio is the measured constant c
    c = max(devs)
    assert 0 < c < 1.0
    assert min(devs) >= 0.5 * c


@pytest.fixture(scope="module")
def singular_family():
    """q = -1.5 pi^2 keeps L coercive; a drift beta (x - 1/2) d/dx pushes a real eigenvalue through zero."""
    g = make_grid(2, 15)
    L = assemble(CoefficientField.identity(g, -1.5 * np.pi**2))

    def Lp(beta):
        return assemble_first_order((lambda x, y: beta * (x - 0.5), 0.0), g)

    def smallest_real(beta):
        w = np.linalg.eigvals((L.matrix + Lp(beta).matrix).toarray())
        return w[np.abs(w.imag) < 1e-9].real.min()

    beta_star = brentq(smallest_real, 0.0, 20.0, xtol=1e-14)
    return g, L, Lp, beta_star


def test_singular_sweep_collapses_at_dense_parameter(singular_family):
    g, L, Lp, beta_star = singular_family
    for beta in (0.0, 5.0, 10.0, 14.0):
        rep = fredholm_check(L, Lp(beta))
        assert rep.unique
        assert rep.sigma_min == pytest.approx(dense_sigma_min(L, Lp(beta)), rel=1e-8)
    rep = fredholm_check(L, Lp(beta_star))
    assert not rep.unique
    assert rep.sigma_min <= 1e-6
    v = rep.direction.ravel()
    A = np.linalg.solve(L.matrix.toarray(), Lp(beta_star).matrix.toarray())
    assert np.linalg.norm(v + A @ v) <= 1e-6 * np.linalg.norm(v)


def test_solve_reports_alternative_at_singular_parameter(singular_family, rng):
    g, L, Lp, beta_star = singular_family
    with pytest.raises(FredholmAlternativeError) as info:
        solve_perturbed(L, Lp(beta_star), g.random(rng), FredholmConfig(inner="direct"))
    assert info.value.sigma_min <= 1e-6
    assert info.value.direction is not None


def test_compactness_proxy_on_dense_singular_values():
    g = make_grid(2, 15)
    L0 = assemble_laplacian(g)
    A = np.linalg.solve(L0.matrix.toarray(), assemble_first_order((0.1, 0.0), g).matrix.toarray())
    sigma = np.linalg.svd(A, compute_uv=False)
    assert np.all(np.diff(sigma) <= 1e-12 * sigma[0])
    p = compactness_proxy(sigma)
    ident = compactness_proxy(np.ones(g.size))
    assert ident["C"] == pytest.approx(g.size)
    assert p["C"] <= 0.1 * g.size
    # a first-order operator composed with an inverse second-order one has order -1; in two
    # dimensions its singular values decay like k^(-1/2), which bounds the mid-spectrum ratio
    assert p["tail"] <= (g.size // 2) ** -0.5
    assert ident["tail"] == 1.0
    assert p["slope"] < -0.5


def test_compactness_proxy_on_known_sequence():
    k = np.arange(1, 101)
    p = compactness_proxy(3.0 / k)
    assert p["C"] == pytest.approx(1.0)
    assert p["slope"] == pytest.approx(-1.0)


def test_operators_on_different_grids_rejected(g31):
    L = assemble_laplacian(g31)
    Lp = assemble_first_order((1.0, 0.0), make_grid(2, 15))
    with pytest.raises(ValueError):
        solve_perturbed(L, Lp, g31.random(np.random.default_rng(0)))
