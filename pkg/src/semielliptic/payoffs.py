"""Payoffs (terminal data) and the exponential transform to bounded data."""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .models import Array, BlockSDE


class PayoffError(ValueError):
    pass


@dataclass(frozen=True)
class AssumptionReport:
    locally_bounded: bool
    smooth_complement: bool
    growth_bound: bool

    @property
    def ok(self) -> bool:
        return self.locally_bounded and self.smooth_complement and self.growth_bound

    def violations(self) -> list[str]:
        out = []
        if not self.locally_bounded:
            out.append("locally_bounded: not bounded on the diffusion subspace")
        if not self.smooth_complement:
            out.append("smooth_complement: not smooth in the complement coordinates")
        if not self.growth_bound:
            out.append("growth_bound: exceeds C exp(C|x|)")
        return out


@dataclass(frozen=True)
class Payoff:
    """Terminal data ``f`` in model coordinates with regularity metadata.

    ``kink_normals`` lists normals of the hyperplanes where ``f`` is not
    smooth; the payoff is smooth in the complement coordinates exactly when
    every normal vanishes there. ``gradient`` is the full gradient where it
    exists (a.e. for kinked payoffs).
    """

    f: Callable[[Array], Array]
    growth_C: float
    smooth_complement: Optional[bool] = None
    gradient: Optional[Callable[[Array], Array]] = None
    kink_normals: tuple = ()
    name: str = "payoff"

    def __call__(self, x) -> Array:
        return np.asarray(self.f(np.asarray(x, dtype=float)), dtype=float)

    def gradient_complement(self, x, d: int) -> Array:
        if self.gradient is None:
            raise PayoffError(f"payoff {self.name!r} has no analytic gradient")
        return self.gradient(np.asarray(x, dtype=float))[..., d:]

    def smooth_in_complement(self, model: BlockSDE) -> bool:
        if self.kink_normals:
            return all(np.allclose(np.asarray(v)[model.d:], 0.0, atol=1e-12 * max(1.0, np.linalg.norm(v)))
                       for v in self.kink_normals)
        return True if self.smooth_complement is None else bool(self.smooth_complement)

    def check_assumptions(self, model: BlockSDE, points: Optional[Array] = None) -> AssumptionReport:
        """Machine check of the three payoff conditions on sample points."""
        if points is None:
            rng = np.random.default_rng(0)
            points = rng.normal(scale=2.0, size=(256, model.n))
        points = np.atleast_2d(points)
        vals = self(points)
        bounded = bool(np.all(np.isfinite(vals)))
        growth = bool(np.all(np.abs(vals) <= self.growth_C * np.exp(self.growth_C * np.linalg.norm(points, axis=-1)) + 1e-12))
        smooth = self.smooth_in_complement(model)
        if smooth and self.gradient is not None and model.has_complement:
            smooth = _gradient_consistent(self, model, points)
        return AssumptionReport(bounded, smooth, growth)


def _gradient_consistent(p: Payoff, model: BlockSDE, points: Array, rtol: float = 1e-4) -> bool:
    d = model.d
    g = p.gradient_complement(points, d)
    for k in range(model.n - d):
        h = 1e-6 * (1.0 + np.abs(points[:, d + k]))
        e = np.zeros(model.n)
        e[d + k] = 1.0
        fd = (p(points + h[:, None] * e) - p(points - h[:, None] * e)) / (2 * h)
        if not np.allclose(g[:, k], fd, rtol=rtol, atol=rtol * (1 + np.abs(fd).max())):
            return False
    return True


# ---------------------------------------------------------------------------
# spread payoffs
# ---------------------------------------------------------------------------

def _rate_map(model: Optional[BlockSDE], n: int):
    """Return (to_rates, linear log map M or None) for the model coordinates."""
    if model is not None and "to_rates" in model.params:
        return model.params["to_rates"], np.asarray(model.params["to_log"])
    return None, None


def _check_indices(i: int, j: int, n: Optional[int]):
    if i == j or min(i, j) < 0 or (n is not None and max(i, j) >= n):
        raise PayoffError(f"invalid coordinate pair ({i}, {j}) for dimension {n}")


def spread_option(i: int, j: int, model: Optional[BlockSDE] = None) -> Payoff:
    """max(x_i - x_j, 0); on LIBOR models x are the rates L = exp(M z)."""
    n = model.n if model is not None else None
    _check_indices(i, j, n)
    to_rates, M = _rate_map(model, n)
    if to_rates is None:
        def f(x):
            return np.maximum(x[..., i] - x[..., j], 0.0)

        def grad(x):
            g = np.zeros_like(x)
            on = (x[..., i] > x[..., j]).astype(float)
            g[..., i] = on
            g[..., j] = -on
            return g
        normal = np.zeros(n if n is not None else max(i, j) + 1)
        normal[i], normal[j] = 1.0, -1.0
        C = 2.0
    else:
        def f(z):
            L = to_rates(z)
            return np.maximum(L[..., i] - L[..., j], 0.0)

        def grad(z):
            L = to_rates(z)
            gL = np.zeros_like(L)
            on = (L[..., i] > L[..., j]).astype(float)
            gL[..., i] = on * L[..., i]
            gL[..., j] = -on * L[..., j]
            return gL @ M
        e = np.zeros(M.shape[0])
        e[i], e[j] = 1.0, -1.0
        normal = M.T @ e  # kink K_i = K_j in model coordinates
        C = max(2.0, np.linalg.norm(M, 2))
    p = Payoff(f, C, gradient=grad, kink_normals=(normal,), name=f"spread_option({i},{j})")
    if model is not None:
        p = replace(p, smooth_complement=p.smooth_in_complement(model))
    return p


def linear_spread(i: int, j: int, c: float, model: Optional[BlockSDE] = None) -> Payoff:
    """c (x_i - x_j); smooth everywhere."""
    n = model.n if model is not None else None
    _check_indices(i, j, n)
    to_rates, M = _rate_map(model, n)
    c = float(c)
    if to_rates is None:
        def f(x):
            return c * (x[..., i] - x[..., j])

        def grad(x):
            g = np.zeros_like(x)
            g[..., i] = c
            g[..., j] = -c
            return g
        C = max(2.0 * abs(c), 1e-3)
    else:
        def f(z):
            L = to_rates(z)
            return c * (L[..., i] - L[..., j])

        def grad(z):
            L = to_rates(z)
            gL = np.zeros_like(L)
            gL[..., i] = c * L[..., i]
            gL[..., j] = -c * L[..., j]
            return gL @ M
        C = max(2.0 * abs(c), np.linalg.norm(M, 2), 1e-3)
    return Payoff(f, C, smooth_complement=True, gradient=grad, name=f"linear_spread({i},{j},{c})")


def constant_payoff(value: float) -> Payoff:
    value = float(value)
    return Payoff(lambda x: np.full(np.shape(x)[:-1], value), max(abs(value), 1e-3),
                  smooth_complement=True, gradient=lambda x: np.zeros_like(x), name=f"constant({value})")


def separable_payoff(f1: Callable, g2: Callable, df1: Optional[Callable] = None, dg2: Optional[Callable] = None,
                     growth_C: float = 2.0) -> Payoff:
    """f1(x_1) + g2(x_2) on a two-dimensional state (toy-model data)."""
    def f(x):
        return f1(x[..., 0]) + g2(x[..., 1])

    grad = None
    if dg2 is not None:
        def grad(x):
            g = np.zeros_like(x)
            g[..., 0] = df1(x[..., 0]) if df1 is not None else np.nan
            g[..., 1] = dg2(x[..., 1])
            return g
    return Payoff(f, growth_C, smooth_complement=True, gradient=grad, name="separable")


# ---------------------------------------------------------------------------
# expression payoffs
# ---------------------------------------------------------------------------

_BINOPS = {
    ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
    ast.Div: np.divide, ast.Pow: np.power,
}
_FUNCS = {"exp": np.exp, "log": np.log, "abs": np.abs, "sqrt": np.sqrt, "cos": np.cos, "sin": np.sin}


def _compile(node, n: int):
    if isinstance(node, ast.Expression):
        return _compile(node.body, n)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        v = float(node.value)
        return lambda x: np.full(x.shape[:-1], v)
    if isinstance(node, ast.Name) and node.id.startswith("x") and node.id[1:].isdigit():
        k = int(node.id[1:])
        if k >= n:
            raise PayoffError(f"coordinate {node.id} out of range for n={n}")
        return lambda x: x[..., k]
    if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name) and node.value.id == "x":
        idx = node.slice
        if isinstance(idx, ast.Constant) and isinstance(idx.value, int) and 0 <= idx.value < n:
            k = idx.value
            return lambda x: x[..., k]
        raise PayoffError("coordinate index must be an integer literal in range")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op, a, b = _BINOPS[type(node.op)], _compile(node.left, n), _compile(node.right, n)
        return lambda x: op(a(x), b(x))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        a = _compile(node.operand, n)
        sign = -1.0 if isinstance(node.op, ast.USub) else 1.0
        return lambda x: sign * a(x)
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
        name = node.func.id
        args = [_compile(a, n) for a in node.args]
        if name in ("max", "min") and len(args) >= 2:
            red = np.maximum if name == "max" else np.minimum

            def call(x):
                out = args[0](x)
                for a in args[1:]:
                    out = red(out, a(x))
                return out
            return call
        if name in _FUNCS and len(args) == 1:
            fn, a = _FUNCS[name], args[0]
            return lambda x: fn(a(x))
    raise PayoffError(f"unsupported expression element: {ast.dump(node)[:60]}")


def expression_payoff(expr: str, n: int, growth_C: float = 2.0, smooth_complement: Optional[bool] = None) -> Payoff:
    """Payoff from a small arithmetic grammar over coordinates ``x0..x{n-1}`` or ``x[i]``.

    Supported: + - * / **, unary minus, max(...), min(...), exp, log, abs, sqrt, cos, sin.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise PayoffError(f"cannot parse payoff expression {expr!r}: {exc.msg}") from None
    fn = _compile(tree, n)
    return Payoff(fn, growth_C, smooth_complement=smooth_complement, name=expr)


def payoff_from_config(cfg: dict, model: BlockSDE) -> Payoff:
    if "name" not in cfg:
        raise PayoffError("missing key 'payoff.name'")
    name = cfg["name"]
    if name == "spread_option":
        return spread_option(cfg["i"], cfg["j"], model)
    if name == "linear_spread":
        return linear_spread(cfg["i"], cfg["j"], cfg.get("c", 1.0), model)
    if name == "constant":
        return constant_payoff(cfg.get("value", 1.0))
    if name == "expression":
        return expression_payoff(cfg["expr"], model.n, cfg.get("growth_C", 2.0), cfg.get("smooth_complement"))
    raise PayoffError(f"unknown payoff name {name!r}")


# ---------------------------------------------------------------------------
# exponential transform
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Weight:
    """w(x) = sqrt(a + q |x|^2) with its gradient and Hessian."""

    a: float
    q: float

    def __call__(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        return np.sqrt(self.a + self.q * np.sum(x * x, axis=-1))

    def grad(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        return self.q * x / self(x)[..., None]

    def hess(self, x) -> Array:
        x = np.asarray(x, dtype=float)
        w = self(x)[..., None, None]
        eye = np.eye(x.shape[-1])
        return (self.q / w) * (eye - self.q * x[..., :, None] * x[..., None, :] / (w * w))


@dataclass(frozen=True)
class TransformedProblem:
    model: BlockSDE
    payoff: Payoff
    a: float
    q: float
    weight: Weight = field(repr=False)

    def read_back(self, x, value) -> Array:
        """u = exp(w(x)) * u_tilde."""
        return np.exp(self.weight(x)) * np.asarray(value)

    def scale(self, x) -> Array:
        return np.exp(self.weight(x))


def exp_transform(model: BlockSDE, payoff: Payoff, a: float = 1.0, q: Optional[float] = None) -> TransformedProblem:
    """Rewrite the problem for u_tilde = exp(-w) u, w = sqrt(a + q|x|^2).

    With A = sigma sigma^T, u_tilde solves the same kind of problem with drift
    b + A grad w and potential c + b.grad w + 1/2 tr(A D^2 w) + 1/2 |sigma^T grad w|^2.
    A vanishes outside the diffusion block, so the block structure survives.
    """
    C = payoff.growth_C
    if q is None:
        q = 2.0 * max(C * C, 1.0)
    if not a > 0:
        raise PayoffError(f"shift a must be positive, got {a}")
    if not q > C * C:
        raise PayoffError(f"decay rate q={q} must exceed growth_C^2={C * C}")
    w = Weight(float(a), float(q))
    base = model

    def drift(x, t=0.0):
        s = base.s(x, t)
        A = s @ np.swapaxes(s, -1, -2)
        return base.b(x, t) + np.einsum("...ij,...j->...i", A, w.grad(x))

    def potential(x, t=0.0):
        s = base.s(x, t)
        A = s @ np.swapaxes(s, -1, -2)
        gw = w.grad(x)
        st_g = np.einsum("...ji,...j->...i", s, gw)
        return (base.c(x, t) + np.sum(base.b(x, t) * gw, axis=-1)
                + 0.5 * np.einsum("...ij,...ji->...", A, w.hess(x))
                + 0.5 * np.sum(st_g * st_g, axis=-1))

    new_model = BlockSDE(base.n, base.d, base.m, drift, base.sigma, potential,
                         name=f"exp_transformed({base.name})", params=dict(base.params, weight=w))

    def f(x):
        return np.exp(-w(x)) * payoff(x)

    grad = None
    if payoff.gradient is not None:
        def grad(x):
            return np.exp(-w(x))[..., None] * (payoff.gradient(x) - payoff(x)[..., None] * w.grad(x))

    new_payoff = Payoff(f, max(1.0, C), smooth_complement=payoff.smooth_complement, gradient=grad,
                        kink_normals=payoff.kink_normals, name=f"exp_transformed({payoff.name})")
    return TransformedProblem(new_model, new_payoff, w.a, w.q, w)
