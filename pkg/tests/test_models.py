import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from semielliptic.models import (
    BlockSDE, CheyetteState, ModelError, factor_split, hoermander_rank, invariant_subspace,
    lie_bracket, lmm_drift, make_cheyette, make_heston, make_reduced_lmm, make_sabr, make_toy_model,
    model_from_config,
)
from semielliptic.oracle import euler_simulate


def test_toy_model_shapes():
    m = make_toy_model(1.0, 1.0)
    x = np.array([0.3, -2.0])
    assert (m.n, m.d, m.m) == (2, 1, 1)
    np.testing.assert_array_equal(m.b(x), [0.0, 1.0])
    np.testing.assert_array_equal(m.s(x), [[1.0], [0.0]])
    assert m.c(x) == 0.0


def test_toy_zero_drift_has_zero_complement_field():
    m = make_toy_model(1.0, 0.0)
    pts = np.random.default_rng(0).normal(size=(20, 2))
    assert np.all(m.complement_field(pts) == 0.0)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_toy_rejects_nonpositive_sigma(sigma):
    with pytest.raises(ModelError):
        make_toy_model(sigma, 1.0)


def test_block_sde_rejects_bad_dims():
    with pytest.raises(ModelError):
        BlockSDE(2, 3, 1, lambda x, t=0: x, lambda x, t=0: x[..., None])
    with pytest.raises(ModelError):
        BlockSDE(2, 1, 0, lambda x, t=0: x, lambda x, t=0: x[..., None])


def _zoo():
    return [
        make_toy_model(0.7, 1.3),
        make_cheyette(0.5, 0.02),
        make_heston(0.01, 1.5, 0.04, 0.3, -0.5),
        make_sabr(0.5, 0.4, 0.2),
        make_reduced_lmm([1, 2, 3, 4], [[0.2], [0.18], [0.15]], [0.03, 0.035, 0.04]),
        make_reduced_lmm([1, 2, 3], [[0.2, 0.05], [0.2, -0.05]], [0.05, 0.04]),
    ]


@pytest.mark.parametrize("model", _zoo(), ids=lambda m: m.name)
def test_complement_rows_of_sigma_vanish(model):
    pts = np.abs(np.random.default_rng(1).normal(scale=0.5, size=(50, model.n))) + 0.01
    if model.name == "reduced_lmm":
        pts = model.params["z0"] + 0.1 * pts
    s = model.s(pts)
    assert np.all(s[:, model.d:, :] == 0.0)
    model.check(pts)


# -- reduced LIBOR model ---------------------------------------------------

def test_lmm_full_factor_has_no_complement():
    m = make_reduced_lmm([1, 2, 3], [[0.2, 0.05], [0.1, -0.05]], [0.05, 0.04])
    assert m.n == m.d == 2
    assert not m.has_complement


def test_lmm_equal_rows_spread_coordinate_is_drift_only():
    sig = 0.2
    m = make_reduced_lmm([1, 2, 3], [[sig], [sig]], [0.05, 0.04])
    assert (m.n, m.d) == (2, 1)
    G = m.params["split"].G[:, 0]
    # kernel direction is the spread direction (1, -1)/sqrt(2) up to sign
    np.testing.assert_allclose(abs(G @ np.array([1, -1]) / np.sqrt(2)), 1.0, atol=1e-12)
    assert np.all(m.s(m.params["z0"])[1] == 0.0)


def test_lmm_drift_vanishes_with_rates():
    F = np.array([[0.2, 0.1], [0.15, -0.05], [0.1, 0.02]])
    L = np.full(3, 1e-300)
    np.testing.assert_allclose(lmm_drift(L, F, np.ones(3)), 0.0, atol=1e-250)
    m = make_reduced_lmm([1, 2, 3, 4], F, [0.03, 0.03, 0.03])
    # in log coordinates the zero-rate limit leaves only the Ito term
    K = np.full(3, -800.0)
    z = m.params["split"].rotation @ K
    muK = m.params["to_log"] @ m.b(z)
    np.testing.assert_allclose(muK, -0.5 * np.sum(F * F, axis=1), atol=1e-12)


def test_lmm_drift_matches_direct_sum():
    F = np.array([[0.2], [0.18], [0.15]])
    L = np.array([0.03, 0.035, 0.04])
    delta = np.array([0.5, 0.5, 0.5])
    ref = np.zeros(3)
    for i in range(3):
        for j in range(i + 1, 3):
            ref[i] -= delta[j] * L[j] * (F[i] @ F[j]) / (1 + delta[j] * L[j])
    np.testing.assert_allclose(lmm_drift(L, F, delta), ref, rtol=1e-14)


def test_lmm_rejects_bad_input():
    with pytest.raises(ModelError):
        make_reduced_lmm([1, 2, 3], [[0.2], [0.2]], [0.05, -0.01])
    with pytest.raises(ModelError):
        make_reduced_lmm([1, 2, 3], [[0.2, 0.4], [0.1, 0.2]], [0.05, 0.04])
    with pytest.raises(ModelError):
        make_reduced_lmm([1, 3, 2], [[0.2], [0.2]], [0.05, 0.04])


# -- Cheyette --------------------------------------------------------------

def test_cheyette_zero_kappa_y_is_linear():
    eta = 0.3
    m = make_cheyette(0.0, eta)
    ps = euler_simulate(m, CheyetteState().as_array(), 1.0, 50, 200, seed=3)
    t = np.arange(51) * ps.dt
    np.testing.assert_allclose(ps.states[:, :, 1], np.broadcast_to(eta * eta * t, (200, 51)), atol=1e-14)


def test_cheyette_mean_matches_moment_ode():
    # with kappa = eta = 1: y' = 1 - 2y, m' = y - m, m(0) = y(0) = 0
    m = make_cheyette(1.0, 1.0)
    T, steps = 1.0, 200
    ps = euler_simulate(m, [0.0, 0.0], T, steps, 20000, seed=5)
    X = ps.terminal[:, 0]
    # moment ODE by fine Euler (the simulated Y is deterministic and Euler too)
    y = mm = 0.0
    dt = T / steps
    for _ in range(steps):
        y, mm = y + (1 - 2 * y) * dt, mm + (y - mm) * dt
    se = X.std(ddof=1) / np.sqrt(len(X))
    assert abs(X.mean() - mm) < 3 * se


def test_cheyette_y_has_no_variance():
    ps = euler_simulate(make_cheyette(0.5, lambda t: 0.1 + 0.05 * t), [0.0, 0.0], 1.0, 20, 5000, seed=1)
    assert np.var(ps.terminal[:, 1]) < 1e-28


# -- Heston ----------------------------------------------------------------

def test_heston_without_vol_of_vol_is_deterministic():
    m = make_heston(0.0, 2.0, 0.04, 0.0, 0.0)
    ps = euler_simulate(m, [1.0, 0.09], 1.0, 100, 50, seed=0)
    assert np.ptp(ps.states[:, :, 1], axis=0).max() == 0.0
    v = 0.09
    for _ in range(100):
        v += 2.0 * (0.04 - v) * 0.01
    assert ps.terminal[0, 1] == pytest.approx(v, rel=1e-12)


def test_heston_variance_fixed_point():
    ps = euler_simulate(make_heston(0.0, 3.0, 0.04, 0.0, 0.0), [1.0, 0.04], 1.0, 50, 10, seed=0)
    np.testing.assert_allclose(ps.states[:, :, 1], 0.04, rtol=1e-14)


def test_heston_rejects_bad_rho():
    with pytest.raises(ModelError):
        make_heston(0.0, 1.0, 0.04, 0.3, 1.5)


def test_heston_independent_increments():
    m = make_heston(0.0, 1.0, 1.0, 1.0, 0.0)
    x = np.array([1.0, 1.0])
    s = m.s(x)
    # at S=1, nu=1, rho=0 the loading is the identity scaled by (1, xi)
    np.testing.assert_allclose(s, np.diag([1.0, 1.0]), atol=1e-15)
    dW = np.random.default_rng(0).standard_normal((100000, 2))
    assert abs(np.corrcoef((dW @ s.T).T)[0, 1]) < 0.02


# -- factor split ----------------------------------------------------------

def test_factor_split_axis_aligned():
    sp = factor_split(np.array([[1.0], [0.0]]))
    np.testing.assert_allclose(np.abs(sp.G[:, 0]), [0.0, 1.0], atol=1e-15)


def test_factor_split_random_4x2(rng):
    F = rng.normal(size=(4, 2))
    sp = factor_split(F)
    np.testing.assert_allclose(F @ F.T @ sp.G, 0.0, atol=1e-10)
    np.testing.assert_allclose(sp.G.T @ sp.G, np.eye(2), atol=1e-12)


def test_factor_split_rank_deficiency_reports_rank():
    with pytest.raises(ModelError, match="rank 1"):
        factor_split(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]]))


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))),
       st.integers(0, 2**32 - 1))
def test_factor_split_properties(dims, seed):
    n, d = dims
    F = np.random.default_rng(seed).normal(size=(n, d))
    sp = factor_split(F)
    assert np.abs(sp.G.T @ F).max() <= 1e-12 * max(1.0, np.abs(F).max())
    assert np.abs(sp.G.T @ sp.G - np.eye(n - d)).max() <= 1e-12
    np.testing.assert_allclose(sp.rotation @ sp.inverse, np.eye(n), atol=1e-10)


# -- Hoermander rank -------------------------------------------------------

def test_toy_rank_is_one_everywhere(rng):
    m = make_toy_model(1.0, 1.0)
    for x in rng.normal(size=(10, 2)):
        assert hoermander_rank(m, x, 0) == 1


def test_zero_sigma_rank_zero():
    m = BlockSDE(2, 1, 1, lambda x, t=0.0: np.ones_like(x), lambda x, t=0.0: np.zeros(x.shape + (1,)))
    for depth in range(3):
        assert hoermander_rank(m, np.array([0.5, 0.5]), depth) == 0


def test_heston_rank_two():
    assert hoermander_rank(make_heston(0.0, 1.0, 0.04, 0.5, 0.0), np.array([1.0, 1.0]), 0) == 2


def test_lie_bracket_linear_fields():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[1.0, 0.0], [0.0, -1.0]])
    V = lambda x: x @ A.T  # noqa: E731
    W = lambda x: x @ B.T  # noqa: E731
    x = np.array([0.3, -0.7])
    # [V, W](x) = J_W V - J_V W = (B A - A B) x
    np.testing.assert_allclose(lie_bracket(V, W)(x), (B @ A - A @ B) @ x, atol=1e-8)


@given(st.floats(0.01, 100.0), st.floats(-2, 2), st.floats(-2, 2))
def test_rank_invariant_under_scaling(c, a, b):
    base = make_heston(0.0, 1.0, 0.04, 0.5, 0.3)
    scaled = BlockSDE(2, 2, 2, lambda x, t=0.0: c * base.b(x, t), lambda x, t=0.0: c * base.s(x, t))
    x = np.array([1.0 + abs(a), 0.1 + abs(b)])
    assert hoermander_rank(scaled, x, 1) == hoermander_rank(base, x, 1)


def test_invariant_subspace_toy():
    m = make_toy_model(1.0, 1.0)
    U = invariant_subspace(m, [np.array([0.0, 0.0]), np.array([1.0, 2.0])])
    assert U.shape == (2, 1)
    np.testing.assert_allclose(abs(U[0, 0]), 1.0, atol=1e-12)


def test_invariant_subspace_single_point_is_span():
    m = make_heston(0.0, 1.0, 0.04, 0.5, 0.0)
    U = invariant_subspace(m, [np.array([1.0, 1.0])])
    assert U.shape[1] == 2


def test_invariant_subspace_glued():
    # full span {e1, e2} where x0 > 0, only {e1} where x0 < 0
    def vol(x, t=0.0):
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = np.maximum(x[..., 0], 0.0)
        return out
    m = BlockSDE(2, 2, 2, lambda x, t=0.0: np.zeros_like(x), vol)
    U = invariant_subspace(m, [np.array([1.0, 0.0]), np.array([-1.0, 0.0])])
    assert U.shape == (2, 1)
    np.testing.assert_allclose(abs(U[0, 0]), 1.0, atol=1e-10)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_invariant_subspace_monotone(seed, k):
    m = make_heston(0.01, 1.0, 0.04, 0.5, 0.3)
    pts = np.abs(np.random.default_rng(seed).normal(size=(k + 1, 2))) + np.array([0.5, 0.0])
    pts[:, 1] = np.where(np.arange(k + 1) % 3 == 2, -0.1, pts[:, 1])  # some points with nu < 0
    dims = [invariant_subspace(m, list(pts[: j + 1])).shape[1] for j in range(k + 1)]
    assert all(a >= b for a, b in zip(dims, dims[1:]))


def test_model_from_config_missing_kind():
    with pytest.raises(ModelError, match="model_kind"):
        model_from_config({"sigma": 1.0})


def test_model_from_config_roundtrip():
    m = model_from_config({"model_kind": "reduced_lmm", "tenors": [1, 2, 3], "loadings": [[0.2], [0.2]],
                           "L0": [0.05, 0.04]})
    assert (m.n, m.d) == (2, 1)
