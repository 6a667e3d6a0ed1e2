import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semielliptic.models import BlockSDE, make_heston, make_toy_model
from semielliptic.oracle import toy_exact
from semielliptic.payoffs import PayoffError, constant_payoff, expression_payoff, spread_option
from semielliptic.scheme import (
    DilatationParams, GridError, GridSpec, SeriesDivergence, dilatate, fitted_ratio, partial_weights, run_series,
    select_rho, series_residual, time_march,
)


def _rotation_model():
    """dX0 = dW, dX1 = X2 dt, dX2 = -X1 dt: a non-commuting complement field."""
    def drift(x, t=0.0):
        out = np.zeros_like(x)
        out[..., 1] = x[..., 2] + 0.3 * x[..., 0]
        out[..., 2] = -x[..., 1]
        return out

    def vol(x, t=0.0):
        out = np.zeros(x.shape + (1,))
        out[..., 0, 0] = 1.0
        return out
    return BlockSDE(3, 1, 1, drift, vol, name="rotation")


@pytest.fixture(scope="module")
def toy_grid():
    return GridSpec.around(make_toy_model(1.0, 1.0), [0.0, 0.0], 1.0, diff_nodes=41, comp_nodes=11)


def test_dilatation_params():
    assert DilatationParams(0.5, 2.0).step == 1.0
    for bad in [(0.0, 1.0), (1.5, 1.0), (0.5, 0.0)]:
        with pytest.raises(ValueError):
            DilatationParams(*bad)


def test_dilatate_scales_coefficients():
    m = make_heston(0.05, 1.5, 0.04, 0.5, -0.7)
    x = np.array([[0.1, 0.04]])
    md = dilatate(m, 0.25)
    np.testing.assert_allclose(md.b(x), 0.25 * m.b(x))
    np.testing.assert_allclose(md.diffusion_block(x[0]), 0.25 * m.diffusion_block(x[0]))
    assert dilatate(m, 1.0) is m


def test_dilatation_equivalence(toy_grid):
    m = make_toy_model(1.0, 1.0)
    p = expression_payoff("cos(x0) * x1", 2)
    a = run_series(m, p, DilatationParams(0.5, 1.0), toy_grid).total
    b = run_series(m, p, DilatationParams(1.0, 0.5), toy_grid).total
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_partial_weights_integrate_polynomials():
    for k in range(1, 9):
        w = partial_weights(k, 0.1)
        s = np.arange(k + 1) * 0.1
        assert w.sum() == pytest.approx(0.1 * k, rel=1e-12)
        if k >= 2:
            assert w @ s ** 2 == pytest.approx((0.1 * k) ** 3 / 3, rel=1e-12)


def test_fitted_ratio():
    assert fitted_ratio([1.0, 0.5, 0.25]) == pytest.approx(0.5)
    assert fitted_ratio([1.0, 0.0]) == 0.0
    assert math.isnan(fitted_ratio([1.0]))


def test_toy_exact(toy_grid):
    """Additively separable toy: the series stops after the first term and matches the closed form."""
    m = make_toy_model(1.0, 1.0)
    p = expression_payoff("x0**2 + x1", 2)
    sol = run_series(m, p, DilatationParams(1.0, 0.5), toy_grid)
    ref = toy_exact(lambda y: y ** 2, lambda y: y, 1.0, 1.0, 0.5, [0.0, 0.0])
    assert sol.value_at([0.0, 0.0]) == pytest.approx(ref, abs=1e-10)
    assert sol.term_norms == [] or max(sol.term_norms) < 1e-8


def test_no_transport_identity():
    """B = 0 reduces the series to the pure diffusion solution."""
    m = make_toy_model(1.0, 0.0)
    g = GridSpec.around(m, [0.0, 0.0], 0.5, diff_nodes=41, comp_nodes=5)
    sol = run_series(m, expression_payoff("cos(x0) * exp(x1)", 2), DilatationParams(1.0, 0.5), g)
    assert sol.deltas == [] and sol.ratio == 0.0
    assert sol.value_at([0.0, 0.5]) == pytest.approx(math.exp(-0.25) * math.exp(0.5), abs=1e-6)


def test_constant_payoff(toy_grid):
    sol = run_series(make_toy_model(1.0, 1.0), constant_payoff(2.5), DilatationParams(1.0, 1.0), toy_grid)
    np.testing.assert_allclose(sol.total, 2.5, atol=1e-12)


def test_time_zero_returns_payoff(toy_grid):
    p = expression_payoff("x0 * x1", 2)
    sols = time_march(make_toy_model(1.0, 1.0), p, 0.0, 0, DilatationParams(1.0, 1.0), toy_grid)
    pts = toy_grid.points().reshape(-1, 2)
    np.testing.assert_allclose(sols[0].total.reshape(-1), p(pts))


def test_time_march_step_mismatch(toy_grid):
    with pytest.raises(ValueError):
        time_march(make_toy_model(1.0, 1.0), constant_payoff(1.0), 1.0, 3, DilatationParams(0.5, 1.0), toy_grid)


def test_semigroup():
    m = make_toy_model(1.0, 1.0)
    p = expression_payoff("cos(x0) * cos(x1)", 2, growth_C=1.0)
    g = GridSpec.around(m, [0.0, 0.0], 0.5)
    one = time_march(m, p, 0.5, 1, DilatationParams(1.0, 0.5), g)[-1].value_at([0.0, 0.0])
    two = time_march(m, p, 0.5, 2, DilatationParams(0.5, 0.5), g)[-1].value_at([0.0, 0.0])
    ref = math.exp(-0.25) * math.cos(0.5)
    assert one == pytest.approx(ref, abs=2e-3)
    assert two == pytest.approx(one, abs=2e-3)


def test_tolerance_stops_series():
    m = _rotation_model()
    g = GridSpec.around(m, [0.0, 0.0, 0.0], 0.25, diff_nodes=21, comp_nodes=9)
    p = expression_payoff("cos(x0) * x1", 3)
    loose = run_series(m, p, DilatationParams(1.0, 0.25), g, L_max=8, tol=1e-3)
    tight = run_series(m, p, DilatationParams(1.0, 0.25), g, L_max=8, tol=1e-9)
    assert loose.truncation_level < tight.truncation_level
    assert loose.term_norms[-1] < 1e-3


def test_terms_contract_and_are_append_only():
    m = _rotation_model()
    g = GridSpec.around(m, [0.0, 0.0, 0.0], 0.25, diff_nodes=21, comp_nodes=9)
    p = expression_payoff("cos(x0) * x1", 3)
    sol = run_series(m, p, DilatationParams(1.0, 0.25), g, L_max=2, tol=0.0)
    first = [t.copy() for t in sol.deltas]
    sol.append(np.zeros_like(sol.u1), g.core_mask().reshape(-1))
    for a, b in zip(first, sol.deltas):
        np.testing.assert_array_equal(a, b)
    assert sol.term_norms[1] < sol.term_norms[0]
    assert sol.ratio < 0.5


def _residual(L, nodes, K):
    m = _rotation_model()
    g = GridSpec.around(m, [0.0, 0.0, 0.0], 0.25, diff_nodes=nodes[0], comp_nodes=nodes[1])
    sol = run_series(m, expression_payoff("cos(x0) * x1", 3), DilatationParams(1.0, 0.25), g, L_max=L, tol=0.0,
                     time_nodes=K)
    resid, _ = series_residual(m, sol)
    return float(np.max(np.abs(resid[:, g.core_mask(0.3).reshape(-1)])))


def test_series_residual_drops_with_corrections():
    bare = _residual(0, (21, 9), 16)
    corrected = _residual(2, (21, 9), 16)
    assert corrected < bare / 5


@pytest.mark.slow
def test_series_residual_converges_under_refinement():
    coarse = _residual(3, (21, 9), 16)
    fine = _residual(3, (41, 17), 32)
    assert fine < coarse / 3


def test_nonsmooth_payoff_rejected():
    from semielliptic.models import make_reduced_lmm
    m = make_reduced_lmm([0.0, 1.0, 2.0, 3.0], np.array([[1.0], [0.9], [0.8]]) * 0.2, [0.03, 0.03, 0.03])
    g = GridSpec.around(m, m.params.get("z0", np.zeros(m.n)), 0.5, diff_nodes=5, comp_nodes=5)
    with pytest.raises(PayoffError, match="override=True"):
        run_series(m, spread_option(0, 1, m), DilatationParams(1.0, 0.5), g)


def test_divergence_reported():
    def drift(x, t=0.0):
        out = np.zeros_like(x)
        out[..., 1] = 40.0 * x[..., 0] * x[..., 1]
        return out

    def vol(x, t=0.0):
        out = np.zeros(x.shape + (1,))
        out[..., 0, 0] = 1.0
        return out
    m = BlockSDE(2, 1, 1, drift, vol)
    g = GridSpec.around(m, [0.0, 0.0], 1.0, diff_nodes=21, comp_nodes=9)
    with pytest.raises((SeriesDivergence, FloatingPointError)):
        run_series(m, expression_payoff("x1", 2), DilatationParams(1.0, 1.0), g, L_max=8, tol=0.0)


def test_select_rho_prefers_largest_contracting():
    m = make_toy_model(1.0, 1.0)
    g = GridSpec.around(m, [0.0, 0.0], 1.0, diff_nodes=21, comp_nodes=9)
    assert select_rho(m, expression_payoff("x0**2 + x1", 2), g, [0.25, 1.0, 0.5]) == 1.0
    with pytest.raises(ValueError):
        select_rho(m, expression_payoff("x1", 2), g, [])


def test_grid_validation():
    m = make_toy_model(1.0, 1.0)
    g = GridSpec((-1.0, -1.0), (1.0, 1.0), (11, 11))
    with pytest.raises(GridError):
        g.validate(m, [0.0, 0.0], 1.0)
    GridSpec.around(m, [0.0, 0.0], 1.0).validate(m, [0.0, 0.0], 1.0)
    with pytest.raises((GridError, ValueError)):
        GridSpec((0.0,), (-1.0,), (5,))


def test_core_mask_shape():
    g = GridSpec((0.0, 0.0), (1.0, 1.0), (9, 5))
    mask = g.core_mask(0.25)
    assert mask.shape == g.shape
    assert mask[4, 2] and not mask[0, 2] and not mask[4, 0]


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 1.0), st.floats(-1, 1))
def test_series_linear_in_payoff(scale, shift):
    m = _rotation_model()
    g = GridSpec.around(m, [0.0, 0.0, 0.0], 0.2, diff_nodes=11, comp_nodes=5)
    base = expression_payoff("cos(x0) * x1 + x2", 3)
    scaled = expression_payoff(f"({scale!r}) * (cos(x0) * x1 + x2) + ({shift!r})", 3)
    dil = DilatationParams(1.0, 0.2)
    a = run_series(m, base, dil, g, L_max=2, tol=0.0).total
    b = run_series(m, scaled, dil, g, L_max=2, tol=0.0).total
    np.testing.assert_allclose(b, scale * a + shift, atol=1e-9)
