"""Block-structured semi-elliptic SDE models.

A model lives on R^n. Brownian noise enters only the first ``d`` coordinates;
the remaining ``n - d`` coordinates move along the drift alone. Coefficients
are vectorised: ``drift(x, t)`` maps ``(..., n) -> (..., n)`` and
``sigma(x, t)`` maps ``(..., n) -> (..., n, m)``. The generator is

    L u = 1/2 (sigma sigma^T) : D^2 u + drift . grad u + potential * u.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray
Coefficient = Callable[..., Array]


class ModelError(ValueError):
    """Raised for invalid model parameters."""


@dataclass(frozen=True)
class BlockSDE:
    n: int
    d: int
    m: int
    drift: Coefficient
    sigma: Coefficient
    potential: Optional[Coefficient] = None
    name: str = "custom"
    # pathwise solution X_t = exact_solution(x0, t, W_t), when one is known
    exact_solution: Optional[Callable[[Array, float, Array], Array]] = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (1 <= self.d <= self.n):
            raise ModelError(f"need 1 <= d <= n, got d={self.d}, n={self.n}")
        if self.m < 1:
            raise ModelError(f"need m >= 1, got m={self.m}")

    # coefficient access -------------------------------------------------
    def b(self, x, t: float = 0.0) -> Array:
        return np.asarray(self.drift(np.asarray(x, dtype=float), t), dtype=float)

    def s(self, x, t: float = 0.0) -> Array:
        return np.asarray(self.sigma(np.asarray(x, dtype=float), t), dtype=float)

    def c(self, x, t: float = 0.0) -> Array:
        x = np.asarray(x, dtype=float)
        if self.potential is None:
            return np.zeros(x.shape[:-1])
        return np.asarray(self.potential(x, t), dtype=float)

    def diffusion_block(self, x, t: float = 0.0) -> Array:
        """(sigma sigma^T) restricted to the diffusion coordinates, shape (..., d, d)."""
        s = self.s(x, t)[..., : self.d, :]
        return s @ np.swapaxes(s, -1, -2)

    def complement_field(self, x, t: float = 0.0) -> Array:
        return self.b(x, t)[..., self.d :]

    @property
    def has_complement(self) -> bool:
        return self.n > self.d

    def check(self, points: Array, t: float = 0.0, lipschitz_bound: float = 1e6) -> None:
        """Sanity-check coefficients at sample points.

        Verifies finiteness, exact zeros in the complement rows of sigma, and
        bounded difference quotients between neighbouring samples.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        b = self.b(pts, t)
        s = self.s(pts, t)
        if b.shape != pts.shape or s.shape != pts.shape + (self.m,):
            raise ModelError(f"coefficient shapes {b.shape}, {s.shape} do not match n={self.n}, m={self.m}")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
            raise ModelError("non-finite coefficients at sample points")
        if np.any(s[:, self.d :, :] != 0.0):
            raise ModelError("sigma has nonzero rows outside the diffusion block")
        if len(pts) > 1:
            dx = np.linalg.norm(np.diff(pts, axis=0), axis=-1)
            ok = dx > 0
            db = np.linalg.norm(np.diff(b, axis=0), axis=-1)[ok] / dx[ok]
            ds = np.linalg.norm(np.diff(s, axis=0).reshape(len(pts) - 1, -1), axis=-1)[ok] / dx[ok]
            if db.size and max(db.max(), ds.max()) > lipschitz_bound:
                raise ModelError("difference quotients exceed the Lipschitz bound")


def _as_time_fn(f) -> Callable[[float], float]:
    if callable(f):
        return f
    value = float(f)
    return lambda t: value


# ---------------------------------------------------------------------------
# model zoo
# ---------------------------------------------------------------------------

def make_toy_model(sigma: float, mu: float) -> BlockSDE:
    """dX1 = sigma dW, dX2 = mu dt."""
    if not sigma > 0:
        raise ModelError(f"sigma must be positive, got {sigma}")
    sigma, mu = float(sigma), float(mu)

    def drift(x, t=0.0):
        out = np.zeros_like(x)
        out[..., 1] = mu
        return out

    def vol(x, t=0.0):
        out = np.zeros(x.shape + (1,))
        out[..., 0, 0] = sigma
        return out

    return BlockSDE(2, 1, 1, drift, vol, name="toy", params={"sigma": sigma, "mu": mu})


def make_gbm(mu: float, sigma: float) -> BlockSDE:
    """Geometric Brownian motion, used as the strong-order reference."""
    mu, sigma = float(mu), float(sigma)

    def exact(x0, t, w):
        return np.asarray(x0) * np.exp((mu - 0.5 * sigma**2) * t + sigma * np.asarray(w))

    return BlockSDE(
        1, 1, 1,
        lambda x, t=0.0: mu * x,
        lambda x, t=0.0: (sigma * x)[..., None],
        name="gbm",
        exact_solution=exact,
        params={"mu": mu, "sigma": sigma},
    )


def make_cheyette(kappa, eta) -> BlockSDE:
    """Cheyette state equations; ``kappa`` and ``eta`` are constants or functions of t.

    dX = (Y - kappa X) dt + eta dW,  dY = (eta^2 - 2 kappa Y) dt.
    """
    kappa_fn, eta_fn = _as_time_fn(kappa), _as_time_fn(eta)
    for t in np.linspace(0.0, 1.0, 5):
        if not (np.isfinite(kappa_fn(t)) and np.isfinite(eta_fn(t))):
            raise ModelError("kappa and eta must be finite")

    def drift(x, t=0.0):
        k, e = kappa_fn(t), eta_fn(t)
        out = np.empty_like(x)
        out[..., 0] = x[..., 1] - k * x[..., 0]
        out[..., 1] = e * e - 2.0 * k * x[..., 1]
        return out

    def vol(x, t=0.0):
        out = np.zeros(x.shape + (1,))
        out[..., 0, 0] = eta_fn(t)
        return out

    return BlockSDE(2, 1, 1, drift, vol, name="cheyette", params={"kappa": kappa, "eta": eta})


@dataclass(frozen=True)
class CheyetteState:
    X: float = 0.0
    Y: float = 0.0

    def as_array(self) -> Array:
        return np.array([self.X, self.Y])


def make_heston(mu: float, kappa: float, theta: float, xi: float, rho: float) -> BlockSDE:
    """Heston model in (S, nu) with full truncation of the variance."""
    if min(kappa, theta, xi) < 0:
        raise ModelError("kappa, theta, xi must be nonnegative")
    if abs(rho) > 1:
        raise ModelError(f"|rho| must be <= 1, got {rho}")
    rho_c = np.sqrt(1.0 - rho * rho)

    def drift(x, t=0.0):
        v = np.maximum(x[..., 1], 0.0)
        out = np.empty_like(x)
        out[..., 0] = mu * x[..., 0]
        out[..., 1] = kappa * (theta - v)
        return out

    def vol(x, t=0.0):
        sv = np.sqrt(np.maximum(x[..., 1], 0.0))
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = sv * x[..., 0]
        out[..., 1, 0] = xi * sv * rho
        out[..., 1, 1] = xi * sv * rho_c
        return out

    return BlockSDE(2, 2, 2, drift, vol, name="heston",
                    params=dict(mu=mu, kappa=kappa, theta=theta, xi=xi, rho=rho))


def make_sabr(beta: float, alpha: float, rho: float) -> BlockSDE:
    """SABR in (L, sigma); L floored at 0 inside the CEV power."""
    if abs(rho) > 1:
        raise ModelError(f"|rho| must be <= 1, got {rho}")
    rho_c = np.sqrt(1.0 - rho * rho)

    def drift(x, t=0.0):
        return np.zeros_like(x)

    def vol(x, t=0.0):
        lb = np.maximum(x[..., 0], 0.0) ** beta
        s = np.maximum(x[..., 1], 0.0)
        out = np.zeros(x.shape + (2,))
        out[..., 0, 0] = s * lb
        out[..., 1, 0] = alpha * s * rho
        out[..., 1, 1] = alpha * s * rho_c
        return out

    return BlockSDE(2, 2, 2, drift, vol, name="sabr", params=dict(beta=beta, alpha=alpha, rho=rho))


# ---------------------------------------------------------------------------
# factor reduction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FactorSplit:
    F: Array
    G: Array

    @property
    def rotation(self) -> Array:
        """R with z = R K; first d rows F^T, remaining rows G^T."""
        return np.vstack([self.F.T, self.G.T])

    @property
    def inverse(self) -> Array:
        F = self.F
        return np.hstack([F @ np.linalg.inv(F.T @ F), self.G])


def numerical_rank(A: Array, rel_tol: float = 1e-8) -> int:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


def factor_split(F) -> FactorSplit:
    """Orthonormal kernel basis G of F F^T for a full-column-rank loading matrix F."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n, d = F.shape
    u, sv, _ = np.linalg.svd(F, full_matrices=True)
    rank = int(np.sum(sv > 1e-12 * max(sv[0], 1e-300))) if sv.size else 0
    if rank != d:
        raise ModelError(f"loading matrix has numerical rank {rank}, expected {d}")
    return FactorSplit(F=F, G=u[:, d:])


def lmm_drift(L: Array, F: Array, deltas: Array) -> Array:
    """Terminal-measure drift coefficient mu^L_i = -sum_{j>i} delta_j L_j g_i.g_j / (1 + delta_j L_j)."""
    n = F.shape[0]
    cov = F @ F.T
    q = deltas * L / (1.0 + deltas * L)  # (..., n)
    # strictly upper triangular mask: j > i
    mask = np.triu(np.ones((n, n)), k=1)
    return -np.einsum("ij,...j->...i", cov * mask, q)


def make_reduced_lmm(tenors: Sequence[float], F, L0: Sequence[float]) -> BlockSDE:
    """Factor-reduced lognormal LIBOR market model in rotated log coordinates.

    State z = R K with K = log L, R = [F^T; G^T]. The first d coordinates
    carry the noise F^T F dW, the remaining n - d are drift only.
    The initial state is stored as ``params['z0']``.
    """
    tenors = np.asarray(tenors, dtype=float)
    F = np.atleast_2d(np.asarray(F, dtype=float))
    L0 = np.asarray(L0, dtype=float)
    n, d = F.shape
    if tenors.shape != (n + 1,) or np.any(np.diff(tenors) <= 0):
        raise ModelError("tenors must be n+1 strictly increasing times")
    if L0.shape != (n,) or np.any(L0 <= 0):
        raise ModelError("initial rates must be n positive numbers")
    split = factor_split(F)
    R, Rinv = split.rotation, split.inverse
    deltas = np.diff(tenors)
    half_var = 0.5 * np.sum(F * F, axis=1)
    FtF = F.T @ F

    def drift(z, t=0.0):
        K = z @ Rinv.T
        muK = -half_var + lmm_drift(np.exp(K), F, deltas)
        return muK @ R.T

    def vol(z, t=0.0):
        out = np.zeros(z.shape + (d,))
        out[..., :d, :] = FtF
        return out

    z0 = R @ np.log(L0)
    return BlockSDE(
        n, d, d, drift, vol, name="reduced_lmm",
        params=dict(tenors=tenors, F=F, L0=L0, split=split, z0=z0,
                    to_rates=lambda z: np.exp(np.asarray(z) @ Rinv.T),
                    to_log=Rinv),
    )


# ---------------------------------------------------------------------------
# Hoermander spans
# ---------------------------------------------------------------------------

def _jacobian(field: Callable[[Array], Array], x: Array) -> Array:
    h = 1e-5 * (1.0 + np.abs(x))
    n = x.size
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        cols.append((field(x + e) - field(x - e)) / (2 * h[i]))
    return np.stack(cols, axis=-1)


def lie_bracket(V: Callable[[Array], Array], W: Callable[[Array], Array]) -> Callable[[Array], Array]:
    """[V, W](x) = J_W(x) V(x) - J_V(x) W(x), Jacobians by central differences."""
    def bracket(x):
        return _jacobian(W, x) @ V(x) - _jacobian(V, x) @ W(x)
    return bracket


def _fields(model: BlockSDE, t: float):
    def column(i):
        return lambda x: model.s(x, t)[:, i]
    drift = lambda x: model.b(x, t)  # noqa: E731
    return drift, [column(i) for i in range(model.m)]


def hoermander_vectors(model: BlockSDE, x, depth: int, t: float = 0.0) -> Array:
    """Columns: noise fields and their iterated brackets (with the drift) up to ``depth``."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    x = np.asarray(x, dtype=float)
    V0, Vs = _fields(model, t)
    level = list(Vs)
    collected = list(level)
    allf = [V0] + list(Vs)
    for _ in range(depth):
        level = [lie_bracket(A, B) for A in level for B in allf]
        collected.extend(level)
    vecs = np.stack([f(x) for f in collected], axis=-1)
    if not np.all(np.isfinite(vecs)):
        raise ModelError(f"non-finite coefficient evaluation near x={x}")
    return vecs


def hoermander_rank(model: BlockSDE, x, depth: int = 0, t: float = 0.0) -> int:
    vecs = hoermander_vectors(model, x, depth, t)
    return numerical_rank(vecs[: model.d])


def _orth(A: Array, rel_tol: float = 1e-8) -> Array:
    if A.size == 0:
        return np.zeros((A.shape[0], 0))
    u, sv, _ = np.linalg.svd(A, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        return np.zeros((A.shape[0], 0))
    return u[:, sv > rel_tol * sv[0]]


def intersect_subspaces(U: Array, W: Array, tol: float = 1e-8) -> Array:
    """Orthonormal basis of span(U) cap span(W); U and W orthonormal columns."""
    if U.shape[1] == 0 or W.shape[1] == 0:
        return np.zeros((U.shape[0], 0))
    # cosines of principal angles equal to one mark shared directions
    u, cos, _ = np.linalg.svd(U.T @ W, full_matrices=True)
    k = int(np.sum(cos > 1.0 - tol))
    return U @ u[:, :k]


def invariant_subspace(model: BlockSDE, sample_points, depth: int = 0, t: float = 0.0) -> Array:
    """Numerical intersection of the Hoermander spans W_x over the samples (n x k basis)."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if len(pts) == 0:
        raise ValueError("need at least one sample point")
    basis = _orth(hoermander_vectors(model, pts[0], depth, t))
    for p in pts[1:]:
        basis = intersect_subspaces(basis, _orth(hoermander_vectors(model, p, depth, t)))
    return basis


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

def model_from_config(cfg: dict) -> BlockSDE:
    """Build a model from a parsed config mapping (key ``model_kind`` selects the factory)."""
    if "model_kind" not in cfg:
        raise ModelError("missing key 'model_kind'")
    kind = cfg["model_kind"]
    p = {k: v for k, v in cfg.items() if k != "model_kind"}
    if kind == "toy":
        return make_toy_model(p["sigma"], p.get("mu", 0.0))
    if kind == "gbm":
        return make_gbm(p["mu"], p["sigma"])
    if kind == "cheyette":
        return make_cheyette(p["kappa"], p["eta"])
    if kind == "heston":
        return make_heston(p["mu"], p["kappa"], p["theta"], p["xi"], p["rho"])
    if kind == "sabr":
        return make_sabr(p["beta"], p["alpha"], p["rho"])
    if kind == "reduced_lmm":
        return make_reduced_lmm(p["tenors"], p["loadings"], p["L0"])
    raise ModelError(f"unknown model_kind {kind!r}")
