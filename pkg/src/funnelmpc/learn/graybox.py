"""Physical-parameter learning for the mass-on-car structure."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import optimize

from ..core import DataLog
from ..plants import moc_accel
from .surrogate import PredictionModel

log = logging.getLogger(__name__)

PARAM_NAMES = ("theta", "m1", "m2", "k", "d")
PARAM_BOX = {"theta": (1e-6, 2 * math.pi), "m1": (1.0, 6.0), "m2": (0.5, 1.5),
             "k": (1.0, 3.0), "d": (0.5, 1.5)}
Z0_BOX = ((-2.5, 3.5), (-2.0, 2.0), (-2.75, 3.25), (-2.0, 2.0))


class BoxError(ValueError):
    """Initial parameters outside the admissible box."""


@dataclass(frozen=True)
class GrayboxParams:
    theta: float
    m1: float
    m2: float
    k: float
    d: float
    z0: tuple = (0.0, 1.0, 0.0, 1.0)

    @classmethod
    def initial_guess(cls) -> "GrayboxParams":
        return cls(1.0, 1.0, 1.0, 1.0, 1.0, (0.0, 1.0, 0.0, 1.0))

    def vector(self) -> np.ndarray:
        return np.array([self.theta, self.m1, self.m2, self.k, self.d, *self.z0], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "GrayboxParams":
        v = [float(x) for x in v]
        return cls(*v[:5], tuple(v[5:9]))


def box_arrays(param_box=None, z0_box=None):
    pb = dict(PARAM_BOX, **(param_box or {}))
    zb = tuple(z0_box) if z0_box is not None else Z0_BOX
    lo = np.array([pb[n][0] for n in PARAM_NAMES] + [b[0] for b in zb], dtype=float)
    hi = np.array([pb[n][1] for n in PARAM_NAMES] + [b[1] for b in zb], dtype=float)
    if np.any(lo > hi):
        raise ValueError("empty parameter box")
    return lo, hi


def check_in_box(params: GrayboxParams, param_box=None, z0_box=None):
    lo, hi = box_arrays(param_box, z0_box)
    v = params.vector()
    bad = [n for n, x, a, b in zip(PARAM_NAMES + ("z0[0]", "z0[1]", "z0[2]", "z0[3]"), v, lo, hi)
           if not a <= x <= b]
    if bad:
        raise BoxError("initial parameters outside the box (would need clamping): " + ", ".join(bad))


class MassOnCarModel(PredictionModel):
    """Mass-on-car prediction model with learned physical parameters.

    State ``(z, zdot, s, sdot)``, output ``z + s cos(theta)``, relative
    degree two.
    """

    m = 1
    nx = 4
    relative_degree = 2

    def __init__(self, params: GrayboxParams):
        self.params = params
        self._c = math.cos(params.theta)

    def rhs(self, x, u):
        x = np.asarray(x, dtype=float)
        p = self.params
        u0 = np.asarray(u, dtype=float)[..., 0]
        zdd, sdd = moc_accel(p.m1, p.m2, p.k, p.d, p.theta, x, u0)
        return np.stack([x[..., 1], zdd, x[..., 3], sdd], axis=-1)

    def output(self, x):
        x = np.asarray(x, dtype=float)
        return (x[..., 0] + self._c * x[..., 2])[..., None]

    def output_rate(self, x, u=None):
        x = np.asarray(x, dtype=float)
        return (x[..., 1] + self._c * x[..., 3])[..., None]

    def reinit(self, y, x_pred=None, ydot=None):
        """Shift the car coordinates so the output (and its rate) match."""
        src = np.asarray(self.params.z0 if x_pred is None else x_pred, dtype=float)
        x = src.copy()
        x[0] = float(np.ravel(y)[0]) - self._c * x[2]
        if ydot is not None:
            x[1] = float(np.ravel(ydot)[0]) - self._c * x[3]
        return x

    def initial_state(self) -> np.ndarray:
        return np.asarray(self.params.z0, dtype=float)


@dataclass
class GrayboxResult:
    params: GrayboxParams
    J: float
    J_init: float
    fallback: bool = False
    message: str = ""
    nfev: int = 0

    @property
    def model(self) -> MassOnCarModel:
        return MassOnCarModel(self.params)


def _rollout_outputs(V, u, tau, substeps):
    """Model outputs at the sample times for a batch of parameter vectors.

    ``V`` has rows ``(theta, m1, m2, k, d, z0...)``; ``u`` holds the inputs
    applied over each sampling interval.
    """
    V = np.atleast_2d(V)
    th, m1, m2, k, d = (V[:, i] for i in range(5))
    x = V[:, 5:9].copy()
    cth = np.cos(th)
    h = tau / substeps

    def f(x, uu):
        zdd, sdd = moc_accel(m1, m2, k, d, th, x, uu)
        return np.stack([x[:, 1], zdd, x[:, 3], sdd], axis=1)

    out = np.empty((len(V), len(u) + 1))
    out[:, 0] = x[:, 0] + cth * x[:, 2]
    with np.errstate(over="ignore", invalid="ignore"):
        for i, ui in enumerate(u):
            for _ in range(substeps):
                k1 = f(x, ui)
                k2 = f(x + 0.5 * h * k1, ui)
                k3 = f(x + 0.5 * h * k2, ui)
                k4 = f(x + h * k3, ui)
                x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            out[:, i + 1] = x[:, 0] + cth * x[:, 2]
    return out


def graybox_objective(log_: DataLog, params: GrayboxParams, model_step=None, window=None) -> float:
    data = log_.window(window)
    if len(data) == 0:
        return 0.0
    t, y, yM, u = data.arrays()
    substeps = 1 if model_step is None else max(1, int(round(data.tau / model_step)))
    r = _rollout_outputs(params.vector(), u[:-1, 0], data.tau, substeps)[0] - y[:, 0]
    return float(r @ r)


def learn_graybox(log_: DataLog, scheme, prev: GrayboxParams, model_step: Optional[float] = None,
                  max_nfev: int = 200) -> GrayboxResult:
    """Box-constrained least squares over ``(theta, m1, m2, k, d, z0)``.

    Uses the whole history unless the scheme sets a window.  Raises
    ``BoxError`` if ``prev`` lies outside the box.
    """
    param_box = getattr(scheme, "param_box", None)
    z0_box = getattr(scheme, "z0_box", None)
    check_in_box(prev, param_box, z0_box)
    lo, hi = box_arrays(param_box, z0_box)
    data = log_.window(getattr(scheme, "window", None))
    if len(data) < 2:
        J0 = graybox_objective(data, prev, model_step) if len(data) else 0.0
        return GrayboxResult(prev, J0, J0, message="no data")
    t, y, yM, u = data.arrays()
    y = y[:, 0]
    u = u[:-1, 0]
    substeps = 1 if model_step is None else max(1, int(round(data.tau / model_step)))

    def res(v):
        r = _rollout_outputs(v, u, data.tau, substeps)[0] - y
        return np.where(np.isfinite(r), r, 1e150)

    def jac(v):
        h = 1e-7 * np.maximum(1.0, np.abs(v))
        p = v.size
        up = np.minimum(v + h, hi)
        dn = np.maximum(v - h, lo)
        E = np.arange(p)
        Vp = np.repeat(v[None], p, axis=0)
        Vm = Vp.copy()
        Vp[E, E] = up
        Vm[E, E] = dn
        R = _rollout_outputs(np.vstack([Vp, Vm]), u, data.tau, substeps)
        return ((R[:p] - R[p:]) / (up - dn)[:, None]).T

    v0 = prev.vector()
    J0 = float(np.sum(res(v0) ** 2))
    try:
        sol = optimize.least_squares(res, v0, jac=jac, bounds=(lo, hi), method="trf",
                                     x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                     max_nfev=max_nfev)
        J = float(np.sum(res(sol.x) ** 2))
        if not np.isfinite(J):
            raise RuntimeError("non-finite objective")
        if J > J0:
            return GrayboxResult(prev, J0, J0, message="previous parameters kept", nfev=sol.nfev)
        return GrayboxResult(GrayboxParams.from_vector(np.clip(sol.x, lo, hi)), J, J0,
                             nfev=sol.nfev)
    except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("gray-box learning failed, keeping previous parameters: %s", exc)
        return GrayboxResult(prev, J0, J0, fallback=True, message=str(exc))


def with_z0(params: GrayboxParams, z0) -> GrayboxParams:
    return replace(params, z0=tuple(float(x) for x in z0))


def fitted_state(log_: DataLog, params: GrayboxParams, model_step=None) -> np.ndarray:
    """Model state at the last logged sample when started from ``params.z0``."""
    t, y, yM, u = log_.arrays()
    substeps = 1 if model_step is None else max(1, int(round(log_.tau / model_step)))
    V = params.vector()[None]
    th, m1, m2, k, d = (V[:, i] for i in range(5))
    x = V[:, 5:9].copy()
    h = log_.tau / substeps

    def f(x, uu):
        zdd, sdd = moc_accel(m1, m2, k, d, th, x, uu)
        return np.stack([x[:, 1], zdd, x[:, 3], sdd], axis=1)

    for ui in u[:-1, 0]:
        for _ in range(substeps):
            k1 = f(x, ui)
            k2 = f(x + 0.5 * h * k1, ui)
            k3 = f(x + 0.5 * h * k2, ui)
            k4 = f(x + h * k3, ui)
            x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x[0]
