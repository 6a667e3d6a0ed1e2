"""Weighted Monte-Carlo estimators for prices, series corrections and deltas.

Each estimator draws one sample point zeta per path on the diffusion
subspace and reweights it by p/phi, where p is the frozen Gaussian kernel
for the relevant duration and phi the sampling density. The complement
coordinates enter through the Duhamel source

    h(s, y) = B(y, x^c) . grad_c u0(s, y, x^c),  u0(s, y, z) = f(y, F^s_y z),

integrated in s by composite Simpson. At s = tau the kernel degenerates to
a point mass, so that node is evaluated at x^d directly.

Paths are generated in fixed-size blocks with substreams keyed by
(seed, block index), so results do not depend on the thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math
from typing import Callable, Optional, Protocol

import numpy as np

from . import diffusion as diff
from .models import Array, BlockSDE
from .payoffs import Payoff
from .transport import DEFAULT_STEP, flow_at_nodes

BLOCK = 4096
TIME_NODES = 8
FD_STEP = 1e-5


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    paths: int
    seed: int

    @property
    def variance(self) -> float:
        """Sample variance of the per-path contributions."""
        return self.std_error ** 2 * self.paths

    def within(self, target: float, k: float = 4.0, slack: float = 0.0) -> bool:
        return abs(self.value - target) <= k * self.std_error + slack


def estimate_from(samples: Array, seed: int, offset: float = 0.0) -> Estimate:
    samples = np.asarray(samples, dtype=float)
    M = len(samples)
    if M == 0:
        raise ValueError("no samples")
    if not np.all(np.isfinite(samples)):
        raise FloatingPointError("non-finite Monte-Carlo samples")
    se = float(np.std(samples, ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    return Estimate(float(np.mean(samples)) + offset, se, M, int(seed))


def block_normals(seed: int, block: int, size: int, dim: int) -> Array:
    return np.random.default_rng([int(seed), int(block)]).standard_normal((size, dim))


def run_blocks(fn: Callable[[Array], Array], seed: int, paths: int, dim: int, threads: int = 1) -> Array:
    """Apply ``fn`` to standard normals block by block and concatenate in block order."""
    if paths < 1:
        raise ValueError(f"paths must be positive, got {paths}")
    sizes = [min(BLOCK, paths - s) for s in range(0, paths, BLOCK)]

    def job(i):
        return np.asarray(fn(block_normals(seed, i, sizes[i], dim)), dtype=float)

    if threads <= 1 or len(sizes) == 1:
        parts = [job(i) for i in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(len(sizes))))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# kernel and source helpers
# ---------------------------------------------------------------------------

def _frozen(model: BlockSDE, x: Array, time: float):
    """Drift on the diffusion block, its covariance rate and the potential at x."""
    A = model.diffusion_block(x, time)
    diff._check_nonsingular(A, x)
    return model.b(x, time)[: model.d], A, float(model.c(x, time))


def _log_kernel(model, x, dur, y, time):
    mu, A, _ = _frozen(model, x, time)
    return diff.kernel_logpdf(x[: model.d] + mu * dur, A * dur, y)


def _kernel_score(model, x, dur, y, l, time, h=None):
    """d/dx_l of log p_dur(y; x) for the frozen Gaussian, y held fixed.

    The Gaussian part is analytic; derivatives of the frozen coefficients
    themselves come from central differences (exactly zero when constant).
    """
    d = model.d
    h = h or 1e-6 * (1.0 + abs(x[l]))
    e = np.zeros_like(x)
    e[l] = h
    mu, A, _ = _frozen(model, x, time)
    mu_p, A_p, _ = _frozen(model, x + e, time)
    mu_m, A_m, _ = _frozen(model, x - e, time)
    dmean = (mu_p - mu_m) / (2 * h) * dur
    if l < d:
        dmean = dmean + np.eye(d)[l]
    cov = A * dur
    dcov = (A_p - A_m) / (2 * h) * dur
    r = np.asarray(y) - (x[:d] + mu * dur)
    z = np.linalg.solve(cov, r.T).T
    score = z @ dmean
    if np.any(dcov != 0):
        score = score + 0.5 * (np.einsum("...i,ij,...j->...", z, dcov, z) - np.trace(np.linalg.solve(cov, dcov)))
    return score


def _dc(model, x, l, time):
    h = 1e-6 * (1.0 + abs(x[l]))
    e = np.zeros_like(x)
    e[l] = h
    return float((model.c(x + e, time) - model.c(x - e, time)) / (2 * h))


def _grad_c(payoff: Payoff, pts: Array, d: int) -> Array:
    if payoff.gradient is not None:
        return payoff.gradient_complement(pts, d)
    out = np.empty(pts.shape[:-1] + (pts.shape[-1] - d,))
    for k in range(pts.shape[-1] - d):
        h = 1e-6 * (1.0 + np.abs(pts[..., d + k]))
        e = np.zeros(pts.shape[-1])
        e[d + k] = 1.0
        out[..., k] = (payoff(pts + h[..., None] * e) - payoff(pts - h[..., None] * e)) / (2 * h)
    return out


def _flows(model, y, z, tau, K, flow_step, time):
    """F^{k tau/K}_y z for k = 0..K, with y (M, d) frozen; shape (K+1, M, n-d)."""
    M = len(y)
    zz = np.broadcast_to(z, (M, len(z))).copy()

    def field(c):
        return model.b(np.concatenate([y, c], axis=-1), time)[:, model.d :]

    return flow_at_nodes(field, zz, tau, K, flow_step)


def duhamel_sources(model: BlockSDE, payoff: Payoff, x: Array, y: Array, tau: float, K: int = TIME_NODES,
                    flow_step: float = DEFAULT_STEP, time: float = 0.0) -> Array:
    """h(s_k, y) = B(y, x^c) . J_{F^s}^T grad_c f(y, F^s x^c) at s_k = k tau / K; shape (K+1, M)."""
    d, n = model.d, model.n
    y = np.atleast_2d(y)
    M = len(y)
    if n == d:
        return np.zeros((K + 1, M))
    xc = x[d:]
    traj = _flows(model, y, xc, tau, K, flow_step, time)
    jac = np.empty((K + 1, M, n - d, n - d))
    for j in range(n - d):
        h = 1e-6 * (1.0 + abs(xc[j]))
        e = np.zeros(n - d)
        e[j] = h
        jac[..., j] = (_flows(model, y, xc + e, tau, K, flow_step, time)
                       - _flows(model, y, xc - e, tau, K, flow_step, time)) / (2 * h)
    B = model.b(np.concatenate([y, np.broadcast_to(xc, (M, n - d))], axis=-1), time)[:, d:]
    out = np.empty((K + 1, M))
    for k in range(K + 1):
        g = _grad_c(payoff, np.concatenate([y, traj[k]], axis=-1), d)
        grad_u0 = np.einsum("mji,mj->mi", jac[k], g)
        out[k] = np.sum(B * grad_u0, axis=-1)
    return out


def _durations(tau, K):
    s = np.linspace(0.0, tau, K + 1)
    return s, tau - s, diff.simpson_weights(K, tau)


# ---------------------------------------------------------------------------
# price
# ---------------------------------------------------------------------------

def _proposal(model, x, tau, inflation, horizon, time):
    kern = diff.gaussian_kernel(model, x, tau if horizon is None else horizon, time)
    return diff.Proposal.around(kern, inflation)


def _price_samples(model, payoff, x, tau, zeta, log_phi, K, flow_step, time):
    """Per-path weighted samples (without the deterministic endpoint node)."""
    d = model.d
    _, _, c = _frozen(model, x, time)
    M = len(zeta)
    states = np.concatenate([zeta, np.broadcast_to(x[d:], (M, model.n - d))], axis=-1)
    r = np.exp(_log_kernel(model, x, tau, zeta, time) - log_phi)
    out = math.exp(c * tau) * payoff(states) * r
    if model.n > d:
        _, dur, w = _durations(tau, K)
        src = duhamel_sources(model, payoff, x, zeta, tau, K, flow_step, time)
        for k in range(K):
            rk = np.exp(_log_kernel(model, x, dur[k], zeta, time) - log_phi)
            out = out + w[k] * math.exp(c * dur[k]) * src[k] * rk
    return out


def _endpoint(model, payoff, x, tau, K, flow_step, time):
    if model.n == model.d:
        return 0.0
    _, _, w = _durations(tau, K)
    src = duhamel_sources(model, payoff, x, x[None, : model.d], tau, K, flow_step, time)
    return float(w[-1] * src[-1, 0])


def price_first_order(model: BlockSDE, payoff: Payoff, tau: float, x, paths: int, seed: int = 0,
                      inflation: float = diff.DEFAULT_INFLATION, proposal_horizon: Optional[float] = None,
                      time_nodes: int = TIME_NODES, threads: int = 1, flow_step: float = DEFAULT_STEP,
                      time: float = 0.0) -> Estimate:
    """First series term u^1(tau, x) by weighted sampling.

    The proposal is the kernel for ``proposal_horizon`` (default: tau) with
    covariance inflated by ``inflation``; it is shared by every time node.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.asarray(x, dtype=float)
    prop = _proposal(model, x, tau, inflation, proposal_horizon, time)

    def fn(xi):
        zeta = prop.generate(xi)
        return _price_samples(model, payoff, x, tau, zeta, prop.logpdf(zeta), time_nodes, flow_step, time)

    samples = run_blocks(fn, seed, paths, model.d, threads)
    return estimate_from(samples, seed, _endpoint(model, payoff, x, tau, time_nodes, flow_step, time))


# ---------------------------------------------------------------------------
# higher-order terms
# ---------------------------------------------------------------------------

class TermEvaluator(Protocol):
    """Access to a previous odd term v and its diffusion-coordinate derivatives."""

    def value(self, r: float, pts: Array) -> Array: ...
    def grad_d(self, r: float, pts: Array) -> Array: ...
    def hess_d(self, r: float, pts: Array) -> Array: ...


@dataclass(frozen=True)
class FunctionTerm:
    """Closed-form term; each callable takes (r, pts)."""

    v: Callable
    dv: Callable
    d2v: Callable

    def value(self, r, pts):
        return self.v(r, pts)

    def grad_d(self, r, pts):
        return self.dv(r, pts)

    def hess_d(self, r, pts):
        return self.d2v(r, pts)


class GridTermEvaluator:
    """Adapter exposing one stored term of a grid series as a TermEvaluator.

    ``index`` 0 is u^1, index l >= 1 is the l-th correction. Space is
    interpolated multilinearly, time linearly between the stored nodes.
    """

    def __init__(self, model: BlockSDE, sol, index: int = 0, **ops_kw):
        from .scheme import GridOps, _clip, _interpolator, dilatate

        dil = sol.dilatation
        ops = GridOps(dilatate(model, dil.rho), sol.grid, dil.T0, time_nodes=len(sol.tau) - 1, **ops_kw)
        hist = sol.u1 if index == 0 else sol.deltas[index - 1]
        d = ops.d
        chans = [hist] + [ops.d1(hist, i) for i in range(d)]
        chans += [ops.d2(hist, i, j) for i in range(d) for j in range(d)]
        data = np.stack(chans, axis=-1).reshape((len(sol.tau),) + sol.grid.shape + (len(chans),))
        self.d = d
        self.tau = sol.tau
        self.grid = sol.grid
        self._clip = _clip
        self._f = [_interpolator(sol.grid, data[k]) for k in range(len(sol.tau))]

    def _eval(self, r, pts):
        pts = self._clip(self.grid, pts, self.d)
        dt = self.tau[1] - self.tau[0]
        k = min(int(np.floor(r / dt)), len(self.tau) - 2)
        a = r / dt - k
        out = self._f[k](pts) * (1 - a)
        if a > 0:
            out = out + a * self._f[k + 1](pts)
        return out

    def value(self, r, pts):
        return self._eval(r, pts)[..., 0]

    def grad_d(self, r, pts):
        return self._eval(r, pts)[..., 1 : 1 + self.d]

    def hess_d(self, r, pts):
        d = self.d
        return self._eval(r, pts)[..., 1 + d :].reshape(np.shape(pts)[:-1] + (d, d))


def _diffusion_generator(model, term: TermEvaluator, r, pts, time):
    d = model.d
    A = model.diffusion_block(pts, time)
    mu = model.b(pts, time)[..., :d]
    return (0.5 * np.einsum("...ij,...ij->...", A, term.hess_d(r, pts))
            + np.sum(mu * term.grad_d(r, pts), axis=-1) + model.c(pts, time) * term.value(r, pts))


def _even_term(model, term, y, z, s, K, flow_step, time):
    """int_0^s (L_D v)(r, y, F^{s-r}_y z) dr by Simpson on K intervals."""
    if s == 0:
        return np.zeros(len(y))
    traj = _flows(model, y, z, s, K, flow_step, time)
    r = np.linspace(0.0, s, K + 1)
    w = diff.simpson_weights(K, s)
    out = np.zeros(len(y))
    for j in range(K + 1):
        pts = np.concatenate([y, traj[K - j]], axis=-1)
        out += w[j] * _diffusion_generator(model, term, r[j], pts, time)
    return out


def correction_sources(model: BlockSDE, term: TermEvaluator, x: Array, y: Array, tau: float,
                       K: int = TIME_NODES, flow_step: float = DEFAULT_STEP, fd_step: float = FD_STEP,
                       time: float = 0.0) -> Array:
    """B(y, x^c) . grad_c du^{2l}(s_k, y, x^c); the gradient by central differences. Shape (K+1, M)."""
    d, n = model.d, model.n
    y = np.atleast_2d(y)
    M = len(y)
    xc = x[d:]
    B = model.b(np.concatenate([y, np.broadcast_to(xc, (M, n - d))], axis=-1), time)[:, d:]
    s = np.linspace(0.0, tau, K + 1)
    out = np.zeros((K + 1, M))
    if not np.any(B):
        return out
    for k in range(1, K + 1):
        for j in range(n - d):
            h = fd_step * (1.0 + abs(xc[j]))
            e = np.zeros(n - d)
            e[j] = h
            g = (_even_term(model, term, y, xc + e, s[k], K, flow_step, time)
                 - _even_term(model, term, y, xc - e, s[k], K, flow_step, time)) / (2 * h)
            out[k] += B[:, j] * g
    return out


def correction_term(model: BlockSDE, l: int, prev_term: TermEvaluator, tau: float, x, paths: int,
                    seed: int = 0, inflation: float = diff.DEFAULT_INFLATION, time_nodes: int = TIME_NODES,
                    threads: int = 1, flow_step: float = DEFAULT_STEP, fd_step: float = FD_STEP,
                    time: float = 0.0) -> Estimate:
    """Correction du^{2l+1}(tau, x) from the previous odd term, same proposal machinery as the price."""
    if l < 1:
        raise ValueError("corrections start at l = 1")
    x = np.asarray(x, dtype=float)
    if not model.has_complement:
        return Estimate(0.0, 0.0, paths, seed)
    _, _, c = _frozen(model, x, time)
    prop = _proposal(model, x, tau, inflation, None, time)
    _, dur, w = _durations(tau, time_nodes)

    def fn(xi):
        zeta = prop.generate(xi)
        log_phi = prop.logpdf(zeta)
        src = correction_sources(model, prev_term, x, zeta, tau, time_nodes, flow_step, fd_step, time)
        out = np.zeros(len(zeta))
        for k in range(1, time_nodes):
            rk = np.exp(_log_kernel(model, x, dur[k], zeta, time) - log_phi)
            out += w[k] * math.exp(c * dur[k]) * src[k] * rk
        return out

    samples = run_blocks(fn, seed, paths, model.d, threads)
    end = correction_sources(model, prev_term, x, x[None, : model.d], tau, time_nodes, flow_step, fd_step, time)
    return estimate_from(samples, seed, float(w[-1] * end[-1, 0]))


# ---------------------------------------------------------------------------
# deltas
# ---------------------------------------------------------------------------

def _shift(x, l, h):
    e = np.zeros_like(x)
    e[l] = h
    return x + e


def delta_naive(model: BlockSDE, payoff: Payoff, tau: float, x, coord: int, paths: int, seed: int = 0,
                inflation: float = diff.DEFAULT_INFLATION, proposal_horizon: Optional[float] = None,
                time_nodes: int = TIME_NODES, threads: int = 1, flow_step: float = DEFAULT_STEP,
                fd_step: float = FD_STEP, time: float = 0.0) -> Estimate:
    """Derivative of the weighted price representation in x_coord with zeta and phi held fixed.

    Kernel dependence enters through the Gaussian score (likelihood ratio);
    complement coordinates also act pathwise on the payoff and the sources.
    """
    x = np.asarray(x, dtype=float)
    d, n = model.d, model.n
    if not 0 <= coord < n:
        raise IndexError(f"coordinate {coord} out of range for n={n}")
    prop = _proposal(model, x, tau, inflation, proposal_horizon, time)
    _, _, c = _frozen(model, x, time)
    dc = _dc(model, x, coord, time)
    _, dur, w = _durations(tau, time_nodes)
    h = fd_step * (1.0 + abs(x[coord]))

    def fn(xi):
        zeta = prop.generate(xi)
        log_phi = prop.logpdf(zeta)
        M = len(zeta)
        states = np.concatenate([zeta, np.broadcast_to(x[d:], (M, n - d))], axis=-1)
        r = np.exp(_log_kernel(model, x, tau, zeta, time) - log_phi)
        f = payoff(states)
        df = _grad_c(payoff, states, d)[:, coord - d] if coord >= d else 0.0
        out = math.exp(c * tau) * r * (f * (tau * dc + _kernel_score(model, x, tau, zeta, coord, time)) + df)
        if n > d:
            src = duhamel_sources(model, payoff, x, zeta, tau, time_nodes, flow_step, time)
            if coord >= d:
                dsrc = (duhamel_sources(model, payoff, _shift(x, coord, h), zeta, tau, time_nodes, flow_step, time)
                        - duhamel_sources(model, payoff, _shift(x, coord, -h), zeta, tau, time_nodes, flow_step, time)) / (2 * h)
            else:
                dsrc = np.zeros_like(src)
            for k in range(time_nodes):
                rk = np.exp(_log_kernel(model, x, dur[k], zeta, time) - log_phi)
                score = _kernel_score(model, x, dur[k], zeta, coord, time)
                out = out + w[k] * math.exp(c * dur[k]) * rk * (src[k] * (dur[k] * dc + score) + dsrc[k])
        return out

    samples = run_blocks(fn, seed, paths, d, threads)
    end = (_endpoint(model, payoff, _shift(x, coord, h), tau, time_nodes, flow_step, time)
           - _endpoint(model, payoff, _shift(x, coord, -h), tau, time_nodes, flow_step, time)) / (2 * h)
    return estimate_from(samples, seed, end)


@dataclass(frozen=True)
class ControlFunction:
    """zeta = g(t, x, xi) with xi ~ lambda; the induced proposal density follows by change of variables."""

    g: Callable[[float, Array, Array], Array]
    jacobian_xi: Callable[[float, Array, Array], Array]
    base_logpdf: Callable[[Array], Array]

    def log_density(self, t: float, x: Array, xi: Array) -> Array:
        """log phi(t, x, g(t, x, xi)) = log lambda(xi) - log|det dg/dxi|."""
        J = self.jacobian_xi(t, x, xi)
        sign, logdet = np.linalg.slogdet(J)
        if np.any(sign == 0):
            raise np.linalg.LinAlgError("singular control Jacobian")
        return self.base_logpdf(xi) - logdet

    def check(self, t: float, x: Array, xi: Array) -> bool:
        return bool(np.all(np.abs(np.linalg.det(self.jacobian_xi(t, x, xi))) > 0))


def default_control(model: BlockSDE, time: float = 0.0) -> ControlFunction:
    """g(t, x, xi) = x^d + sqrt(t) chol(A(x)) xi with standard normal xi."""
    d = model.d

    def chol(x):
        A = model.diffusion_block(x, time)
        diff._check_nonsingular(A, x)
        return np.linalg.cholesky(A)

    def g(t, x, xi):
        return x[:d] + math.sqrt(t) * xi @ chol(x).T

    def jac(t, x, xi):
        return np.broadcast_to(math.sqrt(t) * chol(x), np.shape(xi)[:-1] + (d, d))

    def base(xi):
        return -0.5 * np.sum(xi * xi, axis=-1) - 0.5 * d * math.log(2 * math.pi)

    return ControlFunction(g, jac, base)


def _controlled_samples(model, payoff, control, x, tau, xi, K, flow_step, time):
    d, n = model.d, model.n
    zeta = control.g(tau, x, xi)
    log_phi = control.log_density(tau, x, xi)
    return _price_samples(model, payoff, x, tau, zeta, log_phi, K, flow_step, time)


def delta_controlled(model: BlockSDE, payoff: Payoff, control: Optional[ControlFunction], tau: float, x,
                     coord: int, paths: int, seed: int = 0, time_nodes: int = TIME_NODES, threads: int = 1,
                     flow_step: float = DEFAULT_STEP, fd_step: float = 1e-4, time: float = 0.0) -> Estimate:
    """Delta with the sample point moving with x through the control function.

    The pathwise derivative of the controlled estimator is taken by central
    differences with common base draws xi.
    """
    x = np.asarray(x, dtype=float)
    if not 0 <= coord < model.n:
        raise IndexError(f"coordinate {coord} out of range for n={model.n}")
    control = control or default_control(model, time)
    h = fd_step * (1.0 + abs(x[coord]))
    xp, xm = _shift(x, coord, h), _shift(x, coord, -h)

    def fn(xi):
        if not control.check(tau, x, xi):
            raise np.linalg.LinAlgError("singular control Jacobian at a draw")
        return (_controlled_samples(model, payoff, control, xp, tau, xi, time_nodes, flow_step, time)
                - _controlled_samples(model, payoff, control, xm, tau, xi, time_nodes, flow_step, time)) / (2 * h)

    samples = run_blocks(fn, seed, paths, model.d, threads)
    end = (_endpoint(model, payoff, xp, tau, time_nodes, flow_step, time)
           - _endpoint(model, payoff, xm, tau, time_nodes, flow_step, time)) / (2 * h)
    return estimate_from(samples, seed, end)
