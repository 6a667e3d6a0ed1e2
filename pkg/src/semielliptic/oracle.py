"""Independent references: exact toy solution, full-factor Euler, FD Greeks, strong order."""

from __future__ import annotations

from dataclasses import dataclass
import math
import struct
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .models import Array, BlockSDE
from .montecarlo import BLOCK, Estimate, estimate_from

_GH_ORDER = 64


def toy_exact(f: Callable[[Array], Array], g: Callable[[Array], Array], sigma: float, mu: float, t: float, x) -> float:
    """E f(x1 + sigma W_t) + g(x2 + mu t) by 64-point Gauss-Hermite."""
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    x1, x2 = float(x[0]), float(x[1])
    if t == 0:
        return float(f(np.array(x1)) + g(np.array(x2)))
    z, w = hermegauss(_GH_ORDER)
    vals = np.asarray(f(x1 + sigma * math.sqrt(t) * z), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite f on quadrature nodes")
    return float(vals @ w / math.sqrt(2 * math.pi) + g(np.array(x2 + mu * t)))


@dataclass(frozen=True)
class EulerPathSet:
    states: Array  # (paths, steps + 1, n)
    dt: float
    seed: int

    @property
    def terminal(self) -> Array:
        return self.states[:, -1]

    _MAGIC = b"EPS1"

    def dump(self, path) -> None:
        """Header: magic, paths, steps+1, n (uint64), dt (float64), seed (uint64); body row-major float64."""
        P, S, n = self.states.shape
        with open(path, "wb") as fh:
            fh.write(self._MAGIC + struct.pack("<QQQdQ", P, S, n, self.dt, self.seed))
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EulerPathSet":
        raw = Path(path).read_bytes()
        if raw[:4] != cls._MAGIC:
            raise ValueError("not an Euler path file")
        P, S, n, dt, seed = struct.unpack("<QQQdQ", raw[4:44])
        states = np.frombuffer(raw[44:], dtype="<f8").reshape(P, S, n).copy()
        return cls(states, dt, seed)


def _increments(seed: int, block: int, size: int, steps: int, m: int, dt: float) -> Array:
    return np.random.default_rng([int(seed), int(block)]).standard_normal((size, steps, m)) * math.sqrt(dt)


def _euler(model: BlockSDE, x0: Array, dW: Array, dt: float, keep: bool) -> Array:
    P, steps, _ = dW.shape
    y = np.broadcast_to(np.asarray(x0, dtype=float), (P, model.n)).copy()
    out = [y.copy()] if keep else None
    for k in range(steps):
        t = k * dt
        y = y + model.b(y, t) * dt + np.einsum("pij,pj->pi", model.s(y, t), dW[:, k])
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite Euler state at step {k + 1}")
        if keep:
            out.append(y.copy())
    return np.stack(out, axis=1) if keep else y


def _blocks(paths: int):
    if paths < 1:
        raise ValueError(f"paths must be positive, got {paths}")
    return [min(BLOCK, paths - s) for s in range(0, paths, BLOCK)]


def euler_simulate(model: BlockSDE, x0, T: float, steps: int, paths: int, seed: int = 0) -> EulerPathSet:
    """Full-factor Euler paths Y_{k+1} = Y_k + b dt + sigma dW."""
    dt = T / steps
    parts = [_euler(model, x0, _increments(seed, i, s, steps, model.m, dt), dt, keep=True)
             for i, s in enumerate(_blocks(paths))]
    return EulerPathSet(np.concatenate(parts), dt, int(seed))


def euler_terminal(model: BlockSDE, x0, T: float, steps: int, paths: int, seed: int = 0) -> Array:
    dt = T / steps
    return np.concatenate([_euler(model, x0, _increments(seed, i, s, steps, model.m, dt), dt, keep=False)
                           for i, s in enumerate(_blocks(paths))])


def euler_price(model: BlockSDE, payoff, x0, T: float, steps: int, paths: int, seed: int = 0) -> Estimate:
    return estimate_from(payoff(euler_terminal(model, x0, T, steps, paths, seed)), seed)


def fd_greek(pricer: Callable[[Array], float], x, coord: int, h: Optional[float] = None) -> float:
    """Central difference of a deterministic (fixed-seed) pricer."""
    x = np.asarray(x, dtype=float)
    h = 1e-3 * (1.0 + abs(x[coord])) if h is None else h
    e = np.zeros_like(x)
    e[coord] = h
    return float((pricer(x + e) - pricer(x - e)) / (2 * h))


@dataclass(frozen=True)
class OrderStudy:
    dts: Array
    errors: Array
    gamma: float


def strong_order(model: BlockSDE, x0, T: float, ladder: Sequence[float], paths: int, seed: int = 0) -> OrderStudy:
    """Fit E|X_T - Y_T| ~ dt^gamma with common Brownian increments.

    ``ladder`` lists step sizes; each must divide T and the finest step.
    Coarse increments are sums of fine ones.
    """
    if len(ladder) < 3:
        raise ValueError("strong order needs a ladder of at least 3 step sizes")
    if model.exact_solution is None:
        raise ValueError("model has no pathwise exact solution")
    dts = np.sort(np.asarray(ladder, dtype=float))[::-1]
    n_fine = int(round(T / dts[-1]))
    ratios = [int(round(dt / dts[-1])) for dt in dts]
    if any(not math.isclose(r * dts[-1], dt) for r, dt in zip(ratios, dts)):
        raise ValueError("step sizes must be integer multiples of the finest step")
    x0 = np.asarray(x0, dtype=float)
    sums = np.zeros(len(dts))
    for i, size in enumerate(_blocks(paths)):
        dW = _increments(seed, i, size, n_fine, model.m, dts[-1])
        exact = model.exact_solution(x0, T, dW.sum(axis=1)[:, : model.n])
        for j, r in enumerate(ratios):
            coarse = dW.reshape(size, n_fine // r, r, model.m).sum(axis=2)
            y = _euler(model, x0, coarse, dts[j], keep=False)
            sums[j] += np.sum(np.linalg.norm(np.atleast_2d(exact - y).reshape(size, -1), axis=-1))
    errors = sums / paths
    gamma = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    return OrderStudy(dts, errors, gamma)
