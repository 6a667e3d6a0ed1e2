"""Parabolic sub-problems on the diffusion subspace.

The transition density is replaced by the frozen-coefficient Gaussian
N(x^d + mu^d(x) t, A(x) t) with A the diffusion block of sigma sigma^T at the
start point. Integrals against it use tensor Gauss-Hermite rules for d <= 3
and weighted sampling otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import itertools
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .models import Array, BlockSDE

DEFAULT_ORDER = 20
DEFAULT_INFLATION = 1.5
MAX_TENSOR_DIM = 3


class SingularDiffusion(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class DensityKernel:
    mean: Array  # (..., d)
    cov: Array  # (..., d, d)
    t: float

    @property
    def chol(self) -> Array:
        return np.linalg.cholesky(self.cov)


def gaussian_kernel(model: BlockSDE, x, t: float, time: float = 0.0) -> DensityKernel:
    """Frozen-coefficient Gaussian transition kernel started at the full state ``x``."""
    if not t > 0:
        raise ValueError(f"kernel time must be positive, got {t}")
    x = np.asarray(x, dtype=float)
    d = model.d
    A = model.diffusion_block(x, time)
    _check_nonsingular(A, x)
    mean = x[..., :d] + model.b(x, time)[..., :d] * t
    return DensityKernel(mean, A * t, float(t))


def _check_nonsingular(A: Array, x: Array) -> None:
    ev = np.linalg.eigvalsh(A)
    scale = np.maximum(np.abs(ev).max(axis=-1), 1e-300)
    bad = ev.min(axis=-1) <= 1e-12 * scale
    if np.any(bad):
        where = x[np.argmax(bad)] if np.ndim(bad) else x
        raise SingularDiffusion(f"diffusion block is singular at x={np.round(where, 6)}")


def kernel_logpdf(mean: Array, cov: Array, y: Array) -> Array:
    """Multivariate normal log density; broadcasting over leading axes."""
    d = mean.shape[-1]
    L = np.linalg.cholesky(cov)
    r = np.asarray(y, dtype=float) - mean
    z = np.linalg.solve(L, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (np.sum(z * z, axis=-1) + logdet + d * np.log(2 * np.pi))


def kernel_density(kernel: DensityKernel, y) -> Array:
    return np.exp(kernel_logpdf(kernel.mean, kernel.cov, y))


def kernel_score(mean: Array, cov: Array, y: Array) -> Array:
    """Gradient of the log density with respect to the mean: cov^{-1} (y - mean)."""
    r = np.asarray(y, dtype=float) - mean
    return np.linalg.solve(cov, r[..., None])[..., 0]


def weight(p: Callable[[Array], Array], phi: Callable[[Array], Array], zeta) -> Array:
    """Likelihood ratio p(zeta)/phi(zeta); the proposal must cover the draw."""
    num = np.asarray(p(zeta), dtype=float)
    den = np.asarray(phi(zeta), dtype=float)
    if np.any(den <= 0):
        raise ValueError("proposal density vanishes at a draw (support violation)")
    return num / den


@dataclass(frozen=True)
class Proposal:
    """Gaussian proposal; zeta = mean + chol(cov) xi with xi standard normal."""

    mean: Array
    cov: Array

    @classmethod
    def around(cls, kernel: DensityKernel, inflation: float = DEFAULT_INFLATION) -> "Proposal":
        return cls(np.asarray(kernel.mean), inflation * np.asarray(kernel.cov))

    @property
    def d(self) -> int:
        return self.mean.shape[-1]

    def generate(self, xi: Array) -> Array:
        return self.mean + np.einsum("...ij,...j->...i", np.linalg.cholesky(self.cov), xi)

    def sample(self, rng: np.random.Generator, size: int) -> Array:
        return self.generate(rng.standard_normal((size, self.d)))

    def logpdf(self, z) -> Array:
        return kernel_logpdf(self.mean, self.cov, z)

    def density(self, z) -> Array:
        return np.exp(self.logpdf(z))


@lru_cache(maxsize=None)
def gauss_hermite(order: int, dim: int) -> tuple[Array, Array]:
    """Tensor rule for E[h(Z)], Z ~ N(0, I_dim): nodes (Q, dim), weights (Q,)."""
    z, w = hermegauss(order)
    w = w / np.sqrt(2 * np.pi)
    nodes = np.array(list(itertools.product(z, repeat=dim)))
    weights = np.array([np.prod(c) for c in itertools.product(w, repeat=dim)])
    return nodes, weights


def simpson_weights(n_intervals: int, length: float) -> Array:
    if n_intervals < 2 or n_intervals % 2:
        raise ValueError("composite Simpson needs an even number of intervals")
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (length / n_intervals) / 3.0


def _expect(model, x, dur, fn, order, rng, time):
    """E[fn(Y)] for Y from the frozen kernel over ``dur``; fn maps (..., Q, d) -> (..., Q)."""
    d = model.d
    A = model.diffusion_block(x, time)
    mean = x[..., :d] + model.b(x, time)[..., :d] * dur
    L = np.linalg.cholesky(A * dur)
    if d <= MAX_TENSOR_DIM:
        z, w = gauss_hermite(order, d)
        y = mean[..., None, :] + np.einsum("...ij,qj->...qi", L, z)
        vals = fn(y)
        return np.einsum("...q,q->...", vals, w)
    # weighted sampling from the inflated proposal
    m = order ** 2
    xi = rng.standard_normal(x.shape[:-1] + (m, d))
    prop_cov = DEFAULT_INFLATION * A * dur
    Lp = np.linalg.cholesky(prop_cov)
    y = mean[..., None, :] + np.einsum("...ij,...qj->...qi", Lp, xi)
    logw = (kernel_logpdf(mean[..., None, :], (A * dur)[..., None, :, :], y)
            - kernel_logpdf(mean[..., None, :], prop_cov[..., None, :, :], y))
    return np.mean(fn(y) * np.exp(logw), axis=-1)


def solve_diffusion_step(model: BlockSDE, data: Optional[Callable[[Array], Array]],
                         source: Optional[Callable[[float, Array], Array]], tau: float, x,
                         quadrature_order: int = DEFAULT_ORDER, time_nodes: int = 8,
                         seed: int = 0, time: float = 0.0) -> Array:
    """Frozen-kernel solution of the subspace parabolic problem at ``x``.

    Returns int data(y) p(tau; x, y) dy + int_0^tau int source(s, y) p(tau - s; x, y) dy ds,
    including the factor exp(c(x) * duration) from the potential. ``data`` and
    ``source`` act on diffusion coordinates only.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    x = np.asarray(x, dtype=float)
    d = model.d
    _check_nonsingular(model.diffusion_block(x, time), x)
    c = model.c(x, time)
    rng = np.random.default_rng(seed)
    out = np.zeros(x.shape[:-1])
    if data is not None:
        vals = _expect(model, x, tau, data, quadrature_order, rng, time)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite data on quadrature nodes")
        out = out + np.exp(c * tau) * vals
    if source is not None:
        s_nodes = np.linspace(0.0, tau, time_nodes + 1)
        w = simpson_weights(time_nodes, tau)
        acc = np.zeros(x.shape[:-1])
        for s, ws in zip(s_nodes[:-1], w[:-1]):
            dur = tau - s
            acc = acc + ws * np.exp(c * dur) * _expect(model, x, dur, lambda y, s=s: source(s, y),
                                                       quadrature_order, rng, time)
        acc = acc + w[-1] * np.asarray(source(tau, x[..., :d]), dtype=float)
        out = out + acc
    return out
