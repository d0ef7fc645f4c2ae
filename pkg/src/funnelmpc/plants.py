"""Ground-truth plant simulators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .core import DomainError


class PlantConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PlantModel:
    """Simulated plant with exact state access.

    ``rhs(t, x, u)`` and ``output(x)`` broadcast over leading axes.
    ``output_rate(x)`` gives the exact output derivative; it is needed only
    by the relative-degree-two funnel controller.
    """

    name: str
    n: int
    m: int
    rhs: Callable
    output: Callable
    initial_state: np.ndarray
    relative_degree: int = 1
    output_rate: Optional[Callable] = None
    disturbance: Optional[Callable[[float], np.ndarray]] = None

    def __post_init__(self):
        x0 = np.asarray(self.initial_state, dtype=float)
        if x0.shape != (self.n,):
            raise PlantConfigError(f"initial state of {self.name} must have shape ({self.n},)")
        y0 = np.atleast_1d(self.output(x0))
        if y0.shape != (self.m,):
            raise PlantConfigError("output dimension must equal input dimension m")
        if self.relative_degree not in (1, 2):
            raise PlantConfigError("relative degree must be 1 or 2")
        object.__setattr__(self, "initial_state", x0)

    def with_initial_state(self, x0) -> "PlantModel":
        return PlantModel(self.name, self.n, self.m, self.rhs, self.output, np.asarray(x0, float),
                          self.relative_degree, self.output_rate, self.disturbance)


def plant_output(plant: PlantModel, state) -> np.ndarray:
    return np.atleast_1d(plant.output(np.asarray(state, dtype=float)))


# --- exothermic reactor -------------------------------------------------------


@dataclass(frozen=True)
class ReactorParams:
    k0: float = math.exp(25.0)
    k1: float = 8700.0
    b1: float = 209.2
    b2: float = 1.25
    d: float = 1.1
    c1: float = -1.0
    c2: float = 1.0
    zeta_in: tuple = (1.0, 0.0)
    initial: tuple = (270.0, 0.02, 0.9)

    def __post_init__(self):
        for name in ("k0", "k1", "b1", "b2", "d"):
            if not getattr(self, name) > 0:
                raise PlantConfigError(f"reactor parameter {name} must be positive")
        if not self.c1 < 0:
            raise PlantConfigError("reactor parameter c1 must be negative")
        if self.initial[0] <= 0:
            raise PlantConfigError("reactor temperature must be positive")


def arrhenius(params: ReactorParams, y, zeta1):
    return params.k0 * np.exp(-params.k1 / y) * zeta1


def reactor_rhs(params: ReactorParams, y, zeta, u):
    """Temperature and concentration derivatives.

    The reaction rate is a scalar; it enters both concentrations scaled by
    ``c1`` and ``c2`` respectively.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("reactor temperature must stay positive")
    zeta = np.asarray(zeta, dtype=float)
    alpha = arrhenius(params, y, zeta[..., 0])
    ydot = params.b1 * alpha - params.b2 * y + u
    z1 = params.c1 * alpha + params.d * (params.zeta_in[0] - zeta[..., 0])
    z2 = params.c2 * alpha + params.d * (params.zeta_in[1] - zeta[..., 1])
    return ydot, np.stack([z1, z2], axis=-1)


def reactor_plant(params: ReactorParams = ReactorParams(), disturbance=None) -> PlantModel:
    def rhs(t, x, u):
        ydot, zdot = reactor_rhs(params, x[..., 0], x[..., 1:3], np.asarray(u)[..., 0])
        return np.concatenate([ydot[..., None], zdot], axis=-1)

    return PlantModel(
        name="reactor", n=3, m=1, rhs=rhs,
        output=lambda x: x[..., 0:1],
        initial_state=np.array(params.initial, dtype=float),
        relative_degree=1, disturbance=disturbance,
    )


# --- mass on car --------------------------------------------------------------


@dataclass(frozen=True)
class MassOnCarParams:
    m1: float = 4.0
    m2: float = 1.0
    k: float = 2.0
    d: float = 1.0
    theta: float = math.pi / 4
    initial: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("m1", "m2", "k", "d"):
            if not getattr(self, name) > 0:
                raise PlantConfigError(f"mass-on-car parameter {name} must be positive")
        if not 0 <= self.theta < math.pi / 2 + 1e-15:
            raise PlantConfigError("ramp angle must lie in [0, pi/2]")
        if self.m2 * (self.m1 + self.m2 * math.sin(self.theta) ** 2) <= 0:
            raise PlantConfigError("singular mass matrix")

    @property
    def mass_matrix(self) -> np.ndarray:
        c = self.m2 * math.cos(self.theta)
        return np.array([[self.m1 + self.m2, c], [c, self.m2]])

    @cached_property
    def mass_matrix_inverse(self) -> np.ndarray:
        a, b, c = self.m1 + self.m2, self.m2 * math.cos(self.theta), self.m2
        det = a * c - b * b
        return np.array([[c, -b], [-b, a]]) / det


def moc_accel(m1, m2, k, d, theta, x, u):
    """Accelerations ``(zdd, sdd)``; parameters broadcast against ``x[..., 0]``."""
    cth = np.cos(theta)
    a = m1 + m2
    b = m2 * cth
    det = a * m2 - b * b
    f2 = -k * x[..., 2] - d * x[..., 3]
    zdd = (m2 * u - b * f2) / det
    sdd = (-b * u + a * f2) / det
    return zdd, sdd


def mass_on_car_rhs(params: MassOnCarParams, state, u):
    x = np.asarray(state, dtype=float)
    zdd, sdd = moc_accel(params.m1, params.m2, params.k, params.d, params.theta, x,
                         np.asarray(u, dtype=float).reshape(x.shape[:-1]))
    return np.stack([x[..., 1], zdd, x[..., 3], sdd], axis=-1)


def mass_on_car_plant(params: MassOnCarParams = MassOnCarParams()) -> PlantModel:
    m1, m2, k, d, th = params.m1, params.m2, params.k, params.d, params.theta
    cth = math.cos(th)
    a = m1 + m2
    b = m2 * cth
    det = a * m2 - b * b

    def rhs(t, x, u):
        u0 = np.asarray(u, dtype=float)[..., 0]
        f2 = -k * x[..., 2] - d * x[..., 3]
        return np.stack([x[..., 1], (m2 * u0 - b * f2) / det,
                         x[..., 3], (-b * u0 + a * f2) / det], axis=-1)

    return PlantModel(
        name="mass_on_car", n=4, m=1, rhs=rhs,
        output=lambda x: (x[..., 0] + x[..., 2] * cth)[..., None],
        output_rate=lambda x: (x[..., 1] + x[..., 3] * cth)[..., None],
        initial_state=np.array(params.initial, dtype=float),
        relative_degree=2,
    )


def mass_on_car_energy(params: MassOnCarParams, state) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    v = x[..., [1, 3]]
    kin = 0.5 * np.einsum("...i,ij,...j->...", v, params.mass_matrix, v)
    return kin + 0.5 * params.k * x[..., 2] ** 2


# --- generic linear plant -----------------------------------------------------


def linear_plant(A, B, C, x0, name="linear", relative_degree=1) -> PlantModel:
    """``xdot = A x + B u``, ``y = C x``; used for oracle tests."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if B.shape[1] != C.shape[0]:
        raise PlantConfigError("input and output dimensions must agree")
    return PlantModel(
        name=name, n=A.shape[0], m=C.shape[0],
        rhs=lambda t, x, u: x @ A.T + np.asarray(u) @ B.T,
        output=lambda x: x @ C.T,
        output_rate=None,
        initial_state=np.asarray(x0, dtype=float),
        relative_degree=relative_degree,
    )
