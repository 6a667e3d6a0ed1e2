"""Alternating transport/diffusion series on a tensor grid.

One local step solves the time-dilated problem on [0, T0] (physical length
rho * T0) as

    u = u^1 + sum_l du^{2l+1},

where even terms come from transport along the complement field B and odd
terms from the frozen-kernel diffusion solve on the first d coordinates.
Every term is stored on the grid at the time nodes tau_k = k T0 / K, since
the sources of the next term need its whole time history.

The potential (if any) is grouped with the diffusion operator:
L_D = 1/2 A : D^2_d + mu_d . grad_d + c, L_B = B . grad_c.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import diffusion as diff
from .models import Array, BlockSDE
from .payoffs import Payoff, PayoffError
from .transport import DEFAULT_STEP, flow_at_nodes

log = logging.getLogger(__name__)


class SeriesDivergence(RuntimeError):
    pass


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class DilatationParams:
    rho: float
    T0: float

    def __post_init__(self):
        if not (0 < self.rho <= 1):
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not self.T0 > 0:
            raise ValueError(f"T0 must be positive, got {self.T0}")

    @property
    def step(self) -> float:
        return self.rho * self.T0


def dilatate(model: BlockSDE, rho: float) -> BlockSDE:
    """Scale drift, potential and sigma sigma^T by ``rho`` (sigma by sqrt(rho))."""
    if not (0 < rho <= 1):
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if rho == 1:
        return model
    sr = math.sqrt(rho)
    pot = None
    if model.potential is not None:
        pot = lambda x, t=0.0: rho * model.potential(x, t)  # noqa: E731
    return BlockSDE(
        model.n, model.d, model.m,
        lambda x, t=0.0: rho * model.drift(x, t),
        lambda x, t=0.0: sr * model.sigma(x, t),
        pot, name=f"{model.name}[rho={rho:g}]", params=dict(model.params, rho=rho),
    )


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    lower: tuple
    upper: tuple
    nodes: tuple

    def __post_init__(self):
        if not (len(self.lower) == len(self.upper) == len(self.nodes)):
            raise GridError("lower, upper and nodes must have equal length")
        if any(k < 5 for k in self.nodes):
            raise GridError("need at least 5 nodes per coordinate")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise GridError("empty box")

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple:
        return tuple(self.nodes)

    @property
    def axes(self) -> list[Array]:
        return [np.linspace(lo, hi, k) for lo, hi, k in zip(self.lower, self.upper, self.nodes)]

    @property
    def spacing(self) -> Array:
        return np.array([(hi - lo) / (k - 1) for lo, hi, k in zip(self.lower, self.upper, self.nodes)])

    @property
    def center(self) -> Array:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    def points(self) -> Array:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def core_mask(self, frac: float = 0.25) -> Array:
        """Nodes away from the box boundary (outer ``frac`` of every axis dropped)."""
        masks = []
        for k in self.nodes:
            i = np.arange(k)
            cut = int(math.floor(frac * (k - 1)))
            masks.append((i >= cut) & (i <= k - 1 - cut))
        out = np.ones(self.shape, dtype=bool)
        for i, mk in enumerate(masks):
            out &= mk.reshape([-1 if k == i else 1 for k in range(self.n)])
        return out

    @classmethod
    def around(cls, model: BlockSDE, x0, horizon: float, diff_nodes: int = 41, comp_nodes: int = 21,
               width: float = 5.0, comp_margin: Optional[float] = None) -> "GridSpec":
        """Box of ``width`` diffusion standard deviations plus the complement flow displacement."""
        x0 = np.asarray(x0, dtype=float)
        d = model.d
        A = model.diffusion_block(x0)
        b = model.b(x0)
        lower, upper, nodes = [], [], []
        for i in range(d):
            sd = math.sqrt(max(A[i, i], 0.0) * horizon)
            shift = b[i] * horizon
            half = width * sd + abs(shift)
            lower.append(x0[i] - half)
            upper.append(x0[i] + half)
            nodes.append(diff_nodes)
        for i in range(d, model.n):
            disp = b[i] * horizon
            margin = comp_margin if comp_margin is not None else max(1.0, 2.0 * abs(disp))
            lower.append(min(x0[i], x0[i] + disp) - margin)
            upper.append(max(x0[i], x0[i] + disp) + margin)
            nodes.append(comp_nodes)
        return cls(tuple(map(float, lower)), tuple(map(float, upper)), tuple(nodes))

    def validate(self, model: BlockSDE, x, horizon: float, sds: float = 3.0) -> None:
        x = np.asarray(x, dtype=float)
        if self.n != model.n:
            raise GridError(f"grid dimension {self.n} != model dimension {model.n}")
        A = model.diffusion_block(x)
        for i in range(self.n):
            margin = sds * math.sqrt(max(A[i, i], 0.0) * horizon) if i < model.d else 0.0
            if not (self.lower[i] + margin <= x[i] <= self.upper[i] - margin):
                raise GridError(f"coordinate {i}: point {x[i]:.4g} lacks a {sds} sd margin in "
                                f"[{self.lower[i]:.4g}, {self.upper[i]:.4g}]")


class GridFunction:
    """Multilinear interpolation of grid values.

    Outside the box, the first ``clip`` coordinates (default: all) are
    extrapolated as constants; the remaining ones linearly, which keeps
    complement derivatives continuous where characteristics leave the box.
    """

    def __init__(self, grid: GridSpec, values: Array, clip: Optional[int] = None):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        self._interp = _interpolator(grid, self.values)
        self._clip = grid.n if clip is None else clip

    def __call__(self, x) -> Array:
        return self._interp(_clip(self.grid, x, self._clip))


def _interpolator(grid: GridSpec, values: Array) -> RegularGridInterpolator:
    return RegularGridInterpolator(grid.axes, values, method="linear", bounds_error=False, fill_value=None)


def _clip(grid: GridSpec, x, k: int) -> Array:
    x = np.array(x, dtype=float)
    x[..., :k] = np.clip(x[..., :k], grid.lower[:k], grid.upper[:k])
    return x


# ---------------------------------------------------------------------------
# operators on grid histories
# ---------------------------------------------------------------------------

def partial_weights(k: int, dt: float) -> Array:
    """Quadrature weights on nodes 0..k with spacing dt.

    Composite Simpson for even k, Simpson plus a closing 3/8 panel for odd k >= 3,
    the trapezoid for k = 1.
    """
    if k == 0:
        return np.zeros(1)
    if k == 1:
        return np.array([0.5, 0.5]) * dt
    w = np.zeros(k + 1)
    m = k if k % 2 == 0 else k - 3
    if m > 0:
        w[: m + 1] += diff.simpson_weights(m, m * dt)
    if k % 2:
        w[m : m + 4] += np.array([3.0, 9.0, 9.0, 3.0]) * dt / 8.0
    return w


class GridOps:
    """Precomputed flows, kernels and stencils for one model on one grid."""

    def __init__(self, model: BlockSDE, grid: GridSpec, T0: float, time_nodes: int = 8,
                 order: int = diff.DEFAULT_ORDER, flow_step: float = DEFAULT_STEP, time: float = 0.0):
        if grid.n != model.n:
            raise GridError(f"grid dimension {grid.n} != model dimension {model.n}")
        if time_nodes < 2 or time_nodes % 2:
            raise ValueError("time_nodes must be even and >= 2")
        self.model, self.grid, self.T0, self.K = model, grid, float(T0), int(time_nodes)
        self.time = time
        self.shape = grid.shape
        n, d = model.n, model.d
        self.n, self.d = n, d
        self.flat = grid.points().reshape(-1, n)
        N = len(self.flat)
        self.dt = self.T0 / self.K
        self.tau = np.linspace(0.0, self.T0, self.K + 1)
        self.weights = [partial_weights(k, self.dt) for k in range(self.K + 1)]

        b = model.b(self.flat, time)
        A = model.diffusion_block(self.flat, time)
        diff._check_nonsingular(A, self.flat)
        self.A = A
        self.mu_d = b[:, :d]
        self.B = b[:, d:]
        self.c = model.c(self.flat, time)
        self.has_transport = model.has_complement and np.any(self.B != 0.0)

        xd = self.flat[:, :d]
        if model.has_complement:
            def field(yc):
                return model.b(np.concatenate([xd, yc], axis=-1), time)[:, d:]
            self.traj = flow_at_nodes(field, self.flat[:, d:], self.T0, self.K, flow_step)
        else:
            self.traj = np.zeros((self.K + 1, N, 0))

        z, self.gh_w = diff.gauss_hermite(order, d) if d <= diff.MAX_TENSOR_DIM else (None, None)
        if z is None:
            raise NotImplementedError("grid scheme supports d <= 3")
        L = np.linalg.cholesky(A)
        self.gh_pts = [None]
        self.pot = [np.ones(N)]
        for m in range(1, self.K + 1):
            dur = m * self.dt
            yd = xd[:, None, :] + self.mu_d[:, None, :] * dur + math.sqrt(dur) * np.einsum("nij,qj->nqi", L, z)
            yc = np.broadcast_to(self.flat[:, None, d:], yd.shape[:2] + (n - d,))
            self.gh_pts.append(np.concatenate([yd, yc], axis=-1))
            self.pot.append(np.exp(self.c * dur))

    # interpolation ---------------------------------------------------------
    def interp(self, hist: Array, pts: Array) -> Array:
        """Interpolate every time slice of ``hist`` (K+1, N) at ``pts`` (..., n) -> (..., K+1)."""
        vals = np.moveaxis(hist.reshape((self.K + 1,) + self.shape), 0, -1)
        p = _clip(self.grid, pts, self.d)
        return _interpolator(self.grid, vals)(p.reshape(-1, self.n)).reshape(pts.shape[:-1] + (self.K + 1,))

    # stencils --------------------------------------------------------------
    def _grid(self, hist):
        return hist.reshape((self.K + 1,) + self.shape)

    def d1(self, hist: Array, axis: int) -> Array:
        g = self._grid(hist)
        return np.gradient(g, self.grid.axes[axis], axis=axis + 1, edge_order=2).reshape(hist.shape)

    def d2(self, hist: Array, i: int, j: int) -> Array:
        if i != j:
            return self.d1(self.d1(hist, i), j)
        g = self._grid(hist)
        h = self.grid.spacing[i]
        ax = i + 1
        out = np.empty_like(g)
        sl = lambda a, b: tuple(slice(a, b) if k == ax else slice(None) for k in range(g.ndim))  # noqa: E731
        out[sl(1, -1)] = (g[sl(2, None)] - 2 * g[sl(1, -1)] + g[sl(None, -2)]) / (h * h)
        out[sl(0, 1)] = out[sl(1, 2)]
        out[sl(-1, None)] = out[sl(-2, -1)]
        return out.reshape(hist.shape)

    def transport_term(self, hist: Array) -> Array:
        """B . grad_c of a grid history."""
        out = np.zeros_like(hist)
        for i in range(self.n - self.d):
            out += self.B[:, i] * self.d1(hist, self.d + i)
        return out

    def diffusion_operator(self, hist: Array) -> Array:
        """1/2 A : D^2_d + mu_d . grad_d + c applied to a grid history."""
        out = self.c * hist
        for i in range(self.d):
            out = out + self.mu_d[:, i] * self.d1(hist, i)
            for j in range(self.d):
                out = out + 0.5 * self.A[:, i, j] * self.d2(hist, i, j)
        return out

    # sub-problem solvers ---------------------------------------------------
    def transport_data(self, f: Callable[[Array], Array]) -> Array:
        """Homogeneous transport: u(tau_k, x) = f(x^d, F^{tau_k} x^c)."""
        out = np.empty((self.K + 1, len(self.flat)))
        xd = self.flat[:, : self.d]
        for k in range(self.K + 1):
            out[k] = f(np.concatenate([xd, self.traj[k]], axis=-1))
        return out

    def transport_source(self, S: Array) -> Array:
        """Duhamel part: u(tau_k, x) = int_0^{tau_k} S(s, x^d, F^{tau_k - s} x^c) ds, zero data."""
        xd = self.flat[:, : self.d]
        shifted = [self.interp(S, np.concatenate([xd, self.traj[m]], axis=-1)) for m in range(self.K + 1)]
        out = np.zeros_like(S)
        for k in range(1, self.K + 1):
            w = self.weights[k]
            for j in range(k + 1):
                out[k] += w[j] * shifted[k - j][:, j]
        return out

    def diffuse(self, data: Optional[Callable[[Array], Array]], G: Optional[Array]) -> Array:
        """Frozen-kernel solve with initial ``data`` and source history ``G``."""
        N = len(self.flat)
        out = np.zeros((self.K + 1, N))
        if data is not None:
            out[0] = data(self.flat)
            for k in range(1, self.K + 1):
                vals = data(self.gh_pts[k])
                if not np.all(np.isfinite(vals)):
                    raise FloatingPointError("non-finite data on quadrature nodes")
                out[k] = self.pot[k] * (vals @ self.gh_w)
        if G is not None:
            smoothed = [G.T] + [self.interp(G, self.gh_pts[m]).transpose(0, 2, 1) @ self.gh_w
                                for m in range(1, self.K + 1)]
            for k in range(1, self.K + 1):
                w = self.weights[k]
                for j in range(k + 1):
                    m = k - j
                    out[k] += w[j] * self.pot[m] * smoothed[m][:, j]
        return out


# ---------------------------------------------------------------------------
# public step functions
# ---------------------------------------------------------------------------

def vector_field_step(l: int, model: BlockSDE, prev, grid: GridSpec, T0: float,
                      ops: Optional[GridOps] = None, **kw) -> Array:
    """Even term: transport of the data (l = 0) or of the diffusion-operator source (l > 0).

    ``prev`` is the initial-data callable for l = 0 and the history of
    u^{2l-1} (or its correction) as a (K+1, N) array for l > 0.
    """
    ops = ops or GridOps(model, grid, T0, **kw)
    if l == 0:
        return ops.transport_data(prev)
    return ops.transport_source(ops.diffusion_operator(np.asarray(prev)))


def diffusion_step(l: int, model: BlockSDE, prev_even: Array, grid: GridSpec, T0: float,
                   data: Optional[Callable[[Array], Array]] = None, ops: Optional[GridOps] = None, **kw) -> Array:
    """Odd term: subspace diffusion with source B . grad_c of the even term.

    For l = 0 pass the initial ``data``; corrections (l > 0) start from zero.
    """
    ops = ops or GridOps(model, grid, T0, **kw)
    if l > 0 and data is not None:
        raise ValueError("corrections carry zero initial data")
    G = ops.transport_term(np.asarray(prev_even)) if ops.has_transport else None
    return ops.diffuse(data, G)


# ---------------------------------------------------------------------------
# series
# ---------------------------------------------------------------------------

def fitted_ratio(norms: Sequence[float]) -> float:
    """Geometric-mean ratio of consecutive term norms (0 when the series terminates)."""
    norms = [float(v) for v in norms]
    if not norms or norms[0] == 0.0:
        return 0.0
    if len(norms) == 1:
        return float("nan")
    if norms[-1] == 0.0:
        return 0.0
    return (norms[-1] / norms[0]) ** (1.0 / (len(norms) - 1))


@dataclass
class SeriesSolution:
    grid: GridSpec
    dilatation: Optional[DilatationParams]
    tau: Array
    u1: Array  # (K+1, N)
    deltas: list = field(default_factory=list)  # each (K+1, N)
    term_norms: list = field(default_factory=list)
    term_norms_full: list = field(default_factory=list)
    ratio: float = 0.0
    step_index: int = 0
    d: Optional[int] = None

    @property
    def truncation_level(self) -> int:
        return len(self.deltas)

    def history(self) -> Array:
        out = self.u1.copy()
        for dlt in self.deltas:
            out = out + dlt
        return out

    @property
    def total(self) -> Array:
        """Final-time values on the grid, shape ``grid.shape``."""
        return self.history()[-1].reshape(self.grid.shape)

    def as_function(self) -> GridFunction:
        return GridFunction(self.grid, self.total, self.d)

    def value_at(self, x) -> float:
        return float(self.as_function()(np.asarray(x, dtype=float)[None])[0])

    def append(self, term: Array, core: Array) -> None:
        """Terms are append-only; earlier ones are never modified."""
        last = term[-1]
        self.deltas.append(term)
        self.term_norms.append(float(np.max(np.abs(last[core]))))
        self.term_norms_full.append(float(np.max(np.abs(last))))


def _initial_solution(payoff, grid: GridSpec, dil: Optional[DilatationParams]) -> SeriesSolution:
    vals = payoff(grid.points().reshape(-1, grid.n))
    return SeriesSolution(grid, dil, np.zeros(1), vals[None, :])


def run_series(model: BlockSDE, payoff, dilatation: DilatationParams, grid: GridSpec, L_max: int = 8,
               tol: float = 1e-8, time_nodes: int = 8, order: int = diff.DEFAULT_ORDER,
               override: bool = False, core_frac: float = 0.25, flow_step: float = DEFAULT_STEP,
               fail_ratio: bool = True) -> SeriesSolution:
    """One local step of the alternating series on the dilated problem over [0, T0].

    ``payoff`` may be a Payoff (assumptions are checked unless ``override``)
    or any vectorised callable, e.g. the previous step's GridFunction.
    """
    if isinstance(payoff, Payoff) and not override:
        if not payoff.smooth_in_complement(model):
            raise PayoffError(f"payoff {payoff.name!r} is not smooth in the "
                              "complement coordinates; pass override=True to proceed")
    m = dilatate(model, dilatation.rho)
    ops = GridOps(m, grid, dilatation.T0, time_nodes=time_nodes, order=order, flow_step=flow_step)
    core = grid.core_mask(core_frac).reshape(-1)

    u0 = vector_field_step(0, m, payoff, grid, dilatation.T0, ops=ops)
    u1 = diffusion_step(0, m, u0, grid, dilatation.T0, data=payoff, ops=ops)
    sol = SeriesSolution(grid, dilatation, ops.tau, u1, d=model.d)
    if not ops.has_transport:
        sol.ratio = 0.0
        return sol
    prev = u1
    for l in range(1, L_max + 1):
        even = vector_field_step(l, m, prev, grid, dilatation.T0, ops=ops)
        odd = diffusion_step(l, m, even, grid, dilatation.T0, ops=ops)
        sol.append(odd, core)
        sol.ratio = fitted_ratio(sol.term_norms)
        log.debug("term %d: norm %.3e ratio %.3f", l, sol.term_norms[-1], sol.ratio)
        if sol.term_norms[-1] < tol:
            if math.isnan(sol.ratio):
                sol.ratio = 0.0  # terminated before a ratio could be fitted
            break
        if fail_ratio and len(sol.term_norms) >= 3 and sol.ratio >= 1.0:
            raise SeriesDivergence(f"fitted contraction ratio {sol.ratio:.3f} >= 1 after "
                                   f"{len(sol.term_norms)} terms; reduce rho")
        prev = odd
    return sol


def time_march(model: BlockSDE, payoff, T: float, n_steps: int, dilatation: DilatationParams,
               grid: GridSpec, L_max: int = 8, tol: float = 1e-8, **kw) -> list[SeriesSolution]:
    """Chain local steps over [i rho T0, (i+1) rho T0] via the semigroup property."""
    if T == 0:
        return [_initial_solution(payoff, grid, dilatation)]
    if n_steps < 1 or not math.isclose(n_steps * dilatation.step, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"n_steps * rho * T0 = {n_steps * dilatation.step} does not equal T = {T}")
    out = []
    data = payoff
    override = kw.pop("override", False)
    for i in range(n_steps):
        try:
            sol = run_series(model, data, dilatation, grid, L_max, tol, override=override, **kw)
        except (SeriesDivergence, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise type(exc)(f"time step {i}: {exc}") from exc
        sol.step_index = i
        out.append(sol)
        data = sol.as_function()
    return out


def select_rho(model: BlockSDE, payoff, grid: GridSpec, candidates: Sequence[float], T0: float = 1.0,
               threshold: float = 0.5, floor: float = 1e-12, **kw) -> float:
    """Largest candidate whose first three series terms contract with fitted ratio <= threshold.

    Terms below ``floor`` count as exact termination (ratio 0), so round-off
    in a terminating series is not mistaken for growth.
    """
    if not candidates:
        raise ValueError("empty rho candidate list")
    for rho in sorted(candidates, reverse=True):
        try:
            sol = run_series(model, payoff, DilatationParams(rho, T0), grid, L_max=3, tol=floor,
                             fail_ratio=False, **kw)
        except SeriesDivergence:
            continue
        if sol.ratio <= threshold:
            return rho
    raise ValueError(f"no rho in {list(candidates)} contracts (ratio <= {threshold}); try smaller candidates")


def series_residual(model: BlockSDE, sol: SeriesSolution, time_nodes: Optional[int] = None, **kw):
    """Generator residual of the truncated series on grid stencils.

    Returns (residual, predicted) at interior time nodes, where predicted is
    -B . grad_c of the last correction (the exact residual of the truncation).
    """
    dil = sol.dilatation
    m = dilatate(model, dil.rho)
    K = len(sol.tau) - 1
    ops = GridOps(m, sol.grid, dil.T0, time_nodes=K, **kw)
    U = sol.history()
    dU = np.zeros_like(U)
    dU[1:-1] = (U[2:] - U[:-2]) / (2 * ops.dt)
    gen = ops.diffusion_operator(U) + ops.transport_term(U)
    last = sol.deltas[-1] if sol.deltas else np.zeros_like(U)
    resid = (dU - gen)[1:-1]
    pred = -ops.transport_term(last)[1:-1]
    return resid, pred
