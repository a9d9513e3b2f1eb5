import numpy as np
import pytest

from elliptic_continuation.grid import GridFunction, gradient_energy, inner, make_grid, norm_h0
from elliptic_continuation.mollifier import (
    MollifierError,
    deep_interior,
    make_kernel,
    mollification_error,
    mollify,
    orthogonality_probe,
    rank_deficient_witness,
)

EPS = (0.2, 0.1, 0.05)


@pytest.fixture(scope="module")
def g63():
    return make_grid(2, 63)


def smooth(g):
    return g.sample(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))


@pytest.mark.parametrize("dim,n,eps", [(2, 63, 0.05), (2, 63, 0.2), (2, 15, 0.1), (3, 15, 0.2)])
def test_kernel_unit_integral_and_support(dim, n, eps):
    g = make_grid(dim, n)
    k = make_kernel(g, eps)
    assert abs(k.integral() - 1.0) <= 1e-10
    assert np.all(k.weights >= 0)
    r = k.radius
    offs = np.arange(-r, r + 1) * g.h
    dist = np.sqrt(sum(m**2 for m in np.meshgrid(*([offs] * dim), indexing="ij")))
    assert not np.any(k.weights[dist >= eps])
    assert np.allclose(k.weights, k.weights[::-1])


@pytest.mark.parametrize("eps", [0.01, 0.5, 0.7, -0.1])
def test_epsilon_range(g63, eps):
    with pytest.raises(MollifierError):
        mollify(smooth(g63), eps)


@pytest.mark.parametrize("eps", EPS)
def test_constants_preserved_in_deep_interior(g63, eps):
    one = GridFunction(g63, np.ones(g63.shape))
    m = mollify(one, eps)
    mask = deep_interior(g63, eps)
    assert np.max(np.abs(m.values[mask] - 1.0)) <= 1e-10
    assert not np.any(m.values[~mask])
    centre = (31, 31)
    assert m.values[centre] == pytest.approx(1.0, abs=1e-10)


def test_zero_maps_to_zero(g63):
    assert not np.any(mollify(g63.zeros(), 0.1).values)
    assert orthogonality_probe(g63.zeros(), 0.1) == 0.0


def test_error_decreases_with_epsilon(g63):
    errs = [mollification_error(smooth(g63), e) for e in EPS]
    assert errs[0] > errs[1] > errs[2]


def test_convergence_rate_at_least_first_order():
    g = make_grid(2, 127)
    eps = np.array([0.2, 0.1, 0.05, 0.025])
    errs = [mollification_error(smooth(g), e) for e in eps]
    slope = np.polyfit(np.log(eps), np.log(errs), 1)[0]
    assert slope >= 1.0


def test_contraction_on_random_functions(rng):
    g = make_grid(2, 31)
    for k in range(500):
        h = g.random(rng)
        eps = (0.1, 0.2, 0.3)[k % 3]
        assert norm_h0(mollify(h, eps)) <= norm_h0(h) * (1 + 1e-10)


@pytest.mark.parametrize("eps", [0.1, 0.2])
def test_symmetric_on_deep_interior_functions(eps, rng):
    g = make_grid(2, 31)
    mask = deep_interior(g, eps)
    for _ in range(20):
        u = GridFunction(g, rng.standard_normal(g.shape) * mask)
        v = GridFunction(g, rng.standard_normal(g.shape) * mask)
        a, b = inner(mollify(u, eps), v), inner(u, mollify(v, eps))
        assert abs(a - b) <= 1e-12 * max(abs(a), norm_h0(u) * norm_h0(v))


def test_probe_is_gradient_energy_of_mollified(g63, rng):
    h = g63.random(rng)
    assert orthogonality_probe(h, 0.1) == gradient_energy(mollify(h, 0.1))
    # no orthogonality hypothesis: the probe is just a nonzero diagnostic
    assert orthogonality_probe(h, 0.1) > 1e-4


def test_witness_on_nine_nodes_matches_null_space_oracle():
    g = make_grid(2, 3)
    eps = 0.3
    T, h = rank_deficient_witness(g, eps, rank=4, seed=5)
    # oracle: residual of f is its projection onto the left null space of T
    U, s, _ = np.linalg.svd(T)
    r = int(np.sum(s > 1e-10 * s[0]))
    assert r == 4
    # the witness draws its random columns (one kernel preimage for the single deep node) then f
    draws = np.random.default_rng(5)
    draws.standard_normal(3 * g.size)
    f = draws.standard_normal(g.size)
    null = U[:, r:]
    want = null @ (null.T @ f)
    assert np.allclose(h.flat, want, atol=1e-12)
    assert np.max(np.abs(T.T @ h.flat)) <= 1e-12
    assert orthogonality_probe(h, eps) <= 1e-8 * norm_h0(h) ** 2


def test_witness_probe_vanishes_on_larger_grid(rng):
    g = make_grid(2, 15)
    eps = 0.4
    n_centres = int(deep_interior(g, eps).sum())
    T, h = rank_deficient_witness(g, eps, rank=n_centres + 5, seed=1)
    assert norm_h0(h) > 0.1
    assert orthogonality_probe(h, eps) <= 1e-8 * norm_h0(h) ** 2
    assert orthogonality_probe(g.random(rng), eps) > 1e-4


def test_witness_rank_too_small():
    g = make_grid(2, 15)
    with pytest.raises(MollifierError):
        rank_deficient_witness(g, 0.1, rank=2)
