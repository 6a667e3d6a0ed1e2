import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semielliptic.models import make_gbm, make_toy_model
from semielliptic.oracle import (
    EulerPathSet, euler_price, euler_simulate, euler_terminal, fd_greek, strong_order, toy_exact,
)
from semielliptic.payoffs import expression_payoff


def test_toy_exact_closed_forms():
    sq = lambda y: y ** 2  # noqa: E731
    ident = lambda y: y  # noqa: E731
    assert toy_exact(sq, ident, 1.0, 1.0, 0.5, [0.0, 0.0]) == pytest.approx(1.0, abs=1e-12)
    assert toy_exact(np.cos, np.cos, 2.0, 0.5, 1.0, [0.3, 0.1]) == pytest.approx(
        math.exp(-2.0) * math.cos(0.3) + math.cos(0.6), abs=1e-12)
    assert toy_exact(sq, ident, 1.0, 1.0, 0.0, [2.0, 3.0]) == 7.0
    with pytest.raises(ValueError):
        toy_exact(sq, ident, 1.0, 1.0, -0.1, [0.0, 0.0])


@given(st.floats(0.0, 2.0), st.floats(-2, 2))
def test_toy_exact_semigroup(t, x):
    f = lambda y: np.cos(y)  # noqa: E731
    g = lambda y: 0.0 * y  # noqa: E731
    half = lambda y: toy_exact(f, g, 1.0, 0.0, t / 2, [y, 0.0])  # noqa: E731
    two = toy_exact(np.vectorize(half), g, 1.0, 0.0, t / 2, [x, 0.0])
    assert two == pytest.approx(toy_exact(f, g, 1.0, 0.0, t, [x, 0.0]), abs=1e-10)


def test_euler_determinism_and_roundtrip(tmp_path):
    m = make_toy_model(1.0, 1.0)
    a = euler_simulate(m, [0.0, 0.0], 1.0, 8, 300, seed=2)
    b = euler_simulate(m, [0.0, 0.0], 1.0, 8, 300, seed=2)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.states.shape == (300, 9, 2)
    np.testing.assert_array_equal(a.terminal, euler_terminal(m, [0.0, 0.0], 1.0, 8, 300, seed=2))
    path = tmp_path / "paths.bin"
    a.dump(path)
    c = EulerPathSet.load(path)
    np.testing.assert_array_equal(c.states, a.states)
    assert (c.dt, c.seed) == (a.dt, a.seed)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        EulerPathSet.load(path)


def test_euler_toy_is_exact_in_law():
    m = make_toy_model(1.0, 1.0)
    e = euler_price(m, expression_payoff("x0**2 + x1", 2), [0.0, 0.0], 0.5, 4, 50_000, seed=1)
    assert e.within(1.0)


def test_euler_rejects_bad_paths():
    with pytest.raises(ValueError):
        euler_terminal(make_toy_model(1.0, 1.0), [0.0, 0.0], 1.0, 4, 0)


def test_fd_greek():
    assert fd_greek(lambda x: x[0] ** 3 + x[1], [1.0, 0.0], 0) == pytest.approx(3.0, rel=1e-5)
    assert fd_greek(lambda x: x[0] ** 3 + x[1], [1.0, 0.0], 1, h=0.1) == pytest.approx(1.0)


def test_strong_order_gbm():
    res = strong_order(make_gbm(0.05, 0.4), [1.0], 1.0, [2.0 ** -k for k in range(3, 8)], 20_000, seed=3)
    assert 0.4 <= res.gamma <= 0.6
    assert np.all(np.diff(res.errors) < 0)


def test_strong_order_errors():
    with pytest.raises(ValueError):
        strong_order(make_gbm(0.0, 0.2), [1.0], 1.0, [0.5, 0.25], 100)
    with pytest.raises(ValueError):
        strong_order(make_toy_model(1.0, 1.0), [0.0, 0.0], 1.0, [0.5, 0.25, 0.125], 100)
    with pytest.raises(ValueError):
        strong_order(make_gbm(0.0, 0.2), [1.0], 1.0, [0.5, 0.3, 0.125], 100)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_euler_seed_reproducible(seed):
    m = make_gbm(0.0, 0.3)
    a = euler_terminal(m, [1.0], 1.0, 4, 50, seed)
    np.testing.assert_array_equal(a, euler_terminal(m, [1.0], 1.0, 4, 50, seed))
