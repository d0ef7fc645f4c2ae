"""Fixed-step RK4 and the zero-order-hold solution operator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Union

import numpy as np


class IntegrationError(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, t: float, msg: str = ""):
        super().__init__(msg or f"integration blew up at t={t:.6g}")
        self.t = t


@dataclass(frozen=True)
class VectorField:
    """Right-hand side ``(t, x, u) -> xdot``.

    Evaluators must broadcast over leading batch axes of ``x`` and ``u``.
    """

    dim: int
    fn: Callable[[float, np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, t, x, u):
        return self.fn(t, x, u)


class PiecewiseConstant:
    """Control taking ``values[i]`` on ``[t0 + i*width, t0 + (i+1)*width)``."""

    def __init__(self, t0: float, width: float, values):
        self.t0 = float(t0)
        self.width = float(width)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))

    def __call__(self, t: float) -> np.ndarray:
        i = int(np.floor((t - self.t0) / self.width + 1e-9))
        i = min(max(i, 0), len(self.values) - 1)
        return self.values[i]


class Trajectory(NamedTuple):
    t: np.ndarray
    x: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.x[-1]


ControlLike = Union[np.ndarray, float, PiecewiseConstant, Callable[[float], np.ndarray]]


def rk4_step(f, t, x, u, h):
    k1 = f(t, x, u)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1, u)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2, u)
    k4 = f(t + h, x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def n_steps_for(t0: float, t1: float, step: float) -> int:
    span = t1 - t0
    if not span > 0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if not step > 0:
        raise ValueError("step must be positive")
    n = int(round(span / step))
    if n < 1 or abs(n * step - span) > 1e-9 * max(1.0, abs(span)):
        raise ValueError(f"step {step} does not divide interval length {span}")
    return n


def integrate(field, x0, u: ControlLike, t0: float, t1: float, step: float) -> Trajectory:
    """Classical RK4 on the uniform grid ``t0 + i*step``.

    The control is sampled at each step midpoint and held over the step, so a
    piecewise-constant control must have breakpoints on the grid.
    """
    n = n_steps_for(t0, t1, step)
    h = (t1 - t0) / n
    f = field.fn if isinstance(field, VectorField) else field
    if callable(u):
        u_of = u
    else:
        u_const = np.asarray(u, dtype=float)
        u_of = lambda _t: u_const
    x = np.array(x0, dtype=float)
    xs = np.empty((n + 1,) + x.shape)
    xs[0] = x
    ts = t0 + h * np.arange(n + 1)
    for i in range(n):
        t = ts[i]
        x = rk4_step(f, t, x, u_of(t + 0.5 * h), h)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(ts[i + 1])
        xs[i + 1] = x
    ts[-1] = t1
    return Trajectory(ts, xs)


@dataclass(frozen=True)
class ZohSolutionOp:
    """Advance a state by ``tau`` under a constant input."""

    field: VectorField
    tau: float
    substeps: int = 1

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def step(self) -> float:
        return self.tau / self.substeps


def chi(op: ZohSolutionOp, z_prev, u_held, t0: float = 0.0) -> np.ndarray:
    z = np.array(z_prev, dtype=float)
    u = np.asarray(u_held, dtype=float)
    h = op.step
    f = op.field.fn
    for j in range(op.substeps):
        z = rk4_step(f, t0 + j * h, z, u, h)
    if not np.all(np.isfinite(z)):
        raise IntegrationError(t0 + op.tau)
    return z
