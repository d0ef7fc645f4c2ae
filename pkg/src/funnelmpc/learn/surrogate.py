"""Prediction models used by the MPC component."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from ..integrate import VectorField


class PredictionModel:
    """Interface the OCP solver and the runner rely on.

    State vectors are flat; all methods broadcast over leading batch axes.
    """

    m: int
    nx: int
    relative_degree: int = 1

    def rhs(self, x, u):
        raise NotImplementedError

    def output(self, x):
        raise NotImplementedError

    def output_rate(self, x, u):
        """Exact output derivative; only meaningful for relative degree two."""
        raise NotImplementedError

    def reinit(self, y, x_pred=None, ydot=None) -> np.ndarray:
        """Model state whose output equals the measurement ``y``."""
        raise NotImplementedError

    @property
    def field(self) -> VectorField:
        return VectorField(self.nx, lambda t, x, u: self.rhs(x, u))


class SurrogateModel(PredictionModel):
    """Relative-degree-one model with state ``(y_M, eta)``.

    Subclasses provide ``p``, ``gamma`` and ``q``; ``eta0`` is the internal
    state used when the model is (re)initialised.
    """

    nu: int
    eta0: np.ndarray

    @property
    def nx(self) -> int:
        return self.m + self.nu

    def p(self, y, eta):
        raise NotImplementedError

    def gamma(self, y, eta):
        raise NotImplementedError

    def q(self, y, eta):
        raise NotImplementedError

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., : self.m], x[..., self.m:]

    def rhs(self, x, u):
        y, eta = self.split(x)
        ydot, etadot = surrogate_rhs(self, y, eta, u)
        return np.concatenate([ydot, etadot], axis=-1)

    def output(self, x):
        return np.asarray(x, dtype=float)[..., : self.m]

    def output_rate(self, x, u):
        y, eta = self.split(x)
        return surrogate_rhs(self, y, eta, u)[0]

    def reinit(self, y, x_pred=None, ydot=None):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        eta = self.eta0 if x_pred is None else self.split(x_pred)[1]
        return np.concatenate([y, eta])

    def check_invertible(self, y, eta, tol: float = 1e-10) -> bool:
        s = np.linalg.svd(np.atleast_2d(self.gamma(y, eta)), compute_uv=False)
        return bool(s.min() > tol)


def surrogate_rhs(model: SurrogateModel, y_M, eta, u):
    """``(p + gamma u, q)`` evaluated at ``(y_M, eta)``."""
    y_M = np.asarray(y_M, dtype=float)
    eta = np.asarray(eta, dtype=float)
    u = np.asarray(u, dtype=float)
    g = np.asarray(model.gamma(y_M, eta), dtype=float)
    ydot = model.p(y_M, eta) + np.einsum("...ij,...j->...i", g, u)
    return ydot, model.q(y_M, eta)


@dataclass(frozen=True, eq=False)
class CallableSurrogate(SurrogateModel):
    """Surrogate from user functions ``p``, ``gamma``, ``q``."""

    m: int
    nu: int
    p_fn: Callable
    gamma_fn: Callable
    q_fn: Callable
    eta0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def p(self, y, eta):
        return self.p_fn(y, eta)

    def gamma(self, y, eta):
        return self.gamma_fn(y, eta)

    def q(self, y, eta):
        return self.q_fn(y, eta)


def _mat(a, shape, name):
    arr = np.asarray(a, dtype=float)
    if arr.size == 0:
        arr = np.zeros(shape)
    arr = arr.reshape(shape)
    return arr


@dataclass(frozen=True, eq=False)
class LinearSurrogate(SurrogateModel):
    """``y' = R y + S eta + D1 + gamma u``, ``eta' = Q eta + P y + D2``."""

    R: np.ndarray
    S: np.ndarray
    gamma_mat: np.ndarray
    D1: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    D2: np.ndarray
    eta0: np.ndarray

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        m = R.shape[0]
        eta0 = np.atleast_1d(np.asarray(self.eta0, dtype=float)).ravel()
        nu = eta0.size
        vals = dict(
            R=_mat(R, (m, m), "R"),
            S=_mat(self.S, (m, nu), "S"),
            gamma_mat=_mat(self.gamma_mat, (m, m), "gamma"),
            D1=_mat(self.D1, (m,), "D1"),
            Q=_mat(self.Q, (nu, nu), "Q"),
            P=_mat(self.P, (nu, m), "P"),
            D2=_mat(self.D2, (nu,), "D2"),
            eta0=eta0,
        )
        Q = vals["Q"]
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max(initial=0))):
            raise ValueError("Q must be symmetric")
        vals["Q"] = 0.5 * (Q + Q.T)
        for k, v in vals.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite entries in {k}")
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        A = np.block([[vals["R"], vals["S"]], [vals["P"], vals["Q"]]])
        B = np.vstack([vals["gamma_mat"], np.zeros((nu, m))])
        c = np.concatenate([vals["D1"], vals["D2"]])
        object.__setattr__(self, "_A", A)
        object.__setattr__(self, "_B", B)
        object.__setattr__(self, "_c", c)

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def nu(self) -> int:
        return self.eta0.size

    @classmethod
    def zero(cls, m: int, nu: int = 0, eta0=None, gamma=None) -> "LinearSurrogate":
        eta0 = np.zeros(nu) if eta0 is None else eta0
        gamma = np.eye(m) if gamma is None else gamma
        return cls(np.zeros((m, m)), np.zeros((m, nu)), gamma, np.zeros(m),
                   np.zeros((nu, nu)), np.zeros((nu, m)), np.zeros(nu), eta0)

    def replace(self, **changes) -> "LinearSurrogate":
        return replace(self, **changes)

    def p(self, y, eta):
        return y @ self.R.T + eta @ self.S.T + self.D1

    def gamma(self, y, eta):
        shape = np.broadcast_shapes(np.shape(y)[:-1], np.shape(eta)[:-1])
        return np.broadcast_to(self.gamma_mat, shape + self.gamma_mat.shape)

    def q(self, y, eta):
        return eta @ self.Q.T + y @ self.P.T + self.D2

    def rhs(self, x, u):
        return x @ self._A.T + np.asarray(u, dtype=float) @ self._B.T + self._c

    def blocks(self) -> dict:
        return dict(R=self.R, S=self.S, gamma=self.gamma_mat, D1=self.D1, Q=self.Q,
                    P=self.P, D2=self.D2, eta0=self.eta0)
