"""First-order transport problems solved along characteristics.

Fields act on the complement coordinates only; the diffusion coordinates
are frozen parameters baked into the field callable. All routines are
vectorised over leading axes of the state.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Callable

import numpy as np
from scipy.integrate import simpson

from .models import Array

Field = Callable[[Array], Array]

DEFAULT_STEP = 1e-3


class FlowBlowUp(FloatingPointError):
    def __init__(self, time: float):
        super().__init__(f"non-finite state during characteristic integration at t={time:.6g}")
        self.time = time


def _rk4_step(field: Field, y: Array, h: float) -> Array:
    k1 = field(y)
    k2 = field(y + 0.5 * h * k1)
    k3 = field(y + 0.5 * h * k2)
    k4 = field(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def n_substeps(t: float, step: float = DEFAULT_STEP, even: bool = False) -> int:
    n = max(1, math.ceil(abs(t) / step - 1e-9))
    if even and n % 2:
        n += 1
    return n


def trajectory(field: Field, x, t: float, steps: int) -> Array:
    """Positions F^{k t/steps} x for k = 0..steps, shape (steps + 1, ...)."""
    y = np.array(x, dtype=float)
    out = np.empty((steps + 1,) + y.shape)
    out[0] = y
    if t == 0:
        out[1:] = y
        return out
    h = t / steps
    for k in range(steps):
        y = _rk4_step(field, y, h)
        if not np.all(np.isfinite(y)):
            raise FlowBlowUp((k + 1) * h)
        out[k + 1] = y
    return out


def flow(field: Field, x, t: float, step: float = DEFAULT_STEP) -> Array:
    """Characteristic position F^t x by classical RK4 with ceil(|t|/step) substeps.

    Negative ``t`` integrates the field backwards.
    """
    if t == 0:
        return np.array(x, dtype=float)
    return trajectory(field, x, t, n_substeps(t, step))[-1]


def flow_at_nodes(field: Field, x, t: float, nodes: int, step: float = DEFAULT_STEP) -> Array:
    """Positions at t k/nodes, k = 0..nodes, each node interval resolved with RK4 substeps."""
    per = n_substeps(t / nodes, step) if t != 0 else 1
    traj = trajectory(field, x, t, nodes * per)
    return traj[::per]


@dataclass(frozen=True)
class Flow:
    """Characteristic flow of a complement field with fixed-step control."""

    field: Field
    step: float = DEFAULT_STEP

    def __call__(self, x, t: float) -> Array:
        return flow(self.field, x, t, self.step)

    def jacobian(self, x, t: float, h: float = 1e-6) -> Array:
        x = np.asarray(x, dtype=float)
        k = x.shape[-1]
        cols = []
        for i in range(k):
            e = np.zeros(k)
            e[i] = h
            cols.append((self(x + e, t) - self(x - e, t)) / (2 * h))
        return np.stack(cols, axis=-1)


def solve_transport(field: Field, f: Callable[[Array], Array], g: Callable[[float, Array], Array],
                    t: float, x, step: float = DEFAULT_STEP) -> Array:
    """u(t, x) = f(F^t x) + int_0^t g(s, F^{t-s} x) ds for du/dt = B.grad u + g.

    The source integral uses composite Simpson on the RK4 substep grid: the
    trajectory point at r = t - s is exactly where g(s, .) is needed.
    """
    x = np.asarray(x, dtype=float)
    if t == 0:
        return np.asarray(f(x), dtype=float)
    steps = n_substeps(t, step, even=True)
    traj = trajectory(field, x, t, steps)
    r = np.linspace(0.0, t, steps + 1)
    vals = np.stack([np.asarray(g(t - r[k], traj[k]), dtype=float) * np.ones(x.shape[:-1]) for k in range(steps + 1)])
    integral = simpson(vals, x=r, axis=0)
    return np.asarray(f(traj[-1]), dtype=float) + integral
