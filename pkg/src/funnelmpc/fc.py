"""Model-free funnel controllers used as the safety layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FunnelViolation(RuntimeError):
    """Plant left the adaptive funnel around the prediction.

    ``state`` carries whatever diagnostics the caller attached.
    """

    def __init__(self, msg, t=None, state=None):
        super().__init__(msg)
        self.t = t
        self.state = state or {}


@dataclass(frozen=True)
class ActivationFn:
    """Gain shaping ``beta: [0, 1] -> [0, beta_plus]`` with ``beta(1) = beta_plus``.

    ``kind="constant"`` ignores its argument; ``kind="relu"`` is zero up to
    ``threshold`` and linear from there to ``(1, beta_plus)``.
    """

    kind: str
    beta_plus: float
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "relu"):
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if not self.beta_plus > 0:
            raise ValueError("beta_plus must be positive")
        if self.kind == "relu" and not 0 <= self.threshold < 1:
            raise ValueError("relu threshold must lie in [0, 1)")

    def __call__(self, s: float) -> float:
        if self.kind == "constant":
            return self.beta_plus
        if s <= self.threshold:
            return 0.0
        return self.beta_plus * min(s - self.threshold, 1.0 - self.threshold) / (1.0 - self.threshold)


@dataclass(frozen=True)
class FcState:
    y_M: np.ndarray
    phi: float
    beta: ActivationFn

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError("adaptive funnel must be positive")


def fc_rd1(t: float, y, state: FcState) -> np.ndarray:
    dev = np.atleast_1d(np.asarray(y, dtype=float)) - state.y_M
    nrm = float(np.sqrt(dev @ dev))
    phi = state.phi
    if not nrm < phi:
        raise FunnelViolation(
            f"|y - y_M| = {nrm:.6g} >= phi = {phi:.6g} at t={t:.6g}", t=t,
            state={"y": np.atleast_1d(y), "y_M": state.y_M, "phi": phi})
    b = state.beta(nrm / phi)
    if b == 0.0:
        return np.zeros_like(dev)
    return -b * phi * dev / (phi * phi - nrm * nrm)


def _alpha(s: float) -> float:
    return 1.0 / (1.0 - s)


def fc_rd2(e_M, eDot_M, phi: float, t: float = None) -> np.ndarray:
    """Relative-degree-two funnel law.

    ``e_M`` is the deviation of the plant output from the prediction.
    """
    e = np.atleast_1d(np.asarray(e_M, dtype=float))
    ed = np.atleast_1d(np.asarray(eDot_M, dtype=float))
    ne2 = float(e @ e) / (phi * phi)
    if not ne2 < 1.0:
        raise FunnelViolation(f"|e_M| >= phi={phi:.6g} at t={t}", t=t,
                              state={"e_M": e, "phi": phi})
    w = ed / phi + _alpha(ne2) * e / phi
    nw2 = float(w @ w)
    if not nw2 < 1.0:
        raise FunnelViolation(f"|w| = {np.sqrt(nw2):.6g} >= 1 at t={t}", t=t,
                              state={"e_M": e, "eDot_M": ed, "phi": phi, "w": w})
    return -_alpha(nw2) * w


def combined_input(u_fmpc, u_fc) -> np.ndarray:
    return np.asarray(u_fmpc, dtype=float) + np.asarray(u_fc, dtype=float)
