"""Funnels, references, logged signals and run configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


@dataclass(frozen=True)
class FunnelSpec:
    """Exponential funnel ``psi(t) = a * exp(-b t) + c``."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"funnel amplitude a must be positive, got {self.a}")
        if not self.b >= 0:
            raise ValueError(f"funnel decay b must be nonnegative, got {self.b}")
        if not self.c > 0:
            raise ValueError(f"funnel radius c must be positive, got {self.c}")

    def __call__(self, t):
        return funnel_value(self, t)

    def derivative(self, t):
        return -self.a * self.b * np.exp(-self.b * np.asarray(t, dtype=float))

    @property
    def sup(self) -> float:
        return self.a + self.c

    @property
    def inf(self) -> float:
        return self.c


def funnel_value(spec: FunnelSpec, t):
    """Evaluate the funnel radius at scalar or array ``t >= 0``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(~np.isfinite(t_arr)):
        raise DomainError(f"funnel evaluated at invalid time {t!r}")
    val = spec.a * np.exp(-spec.b * t_arr) + spec.c
    return float(val) if val.ndim == 0 else val


def funnel_derivative_bound(spec: FunnelSpec) -> float:
    # |psi'| = a b exp(-b t) peaks at t = 0
    return spec.a * spec.b


@dataclass(frozen=True)
class ReferenceSignal:
    """Reference ``t -> y_ref(t)`` with declared sup bounds on value and rate.

    ``fn`` must accept an array of times of shape ``(n,)`` and return shape
    ``(n, m)``.  ``deriv`` is optional and only used for bound checks.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    m: int
    sup: float
    rate_sup: float
    deriv: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = "custom"

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.asarray(self.fn(t_arr), dtype=float).reshape(t_arr.size, self.m)
        return out[0] if np.ndim(t) == 0 else out

    def rate(self, t):
        if self.deriv is None:
            raise NotImplementedError("reference has no derivative evaluator")
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.asarray(self.deriv(t_arr), dtype=float).reshape(t_arr.size, self.m)
        return out[0] if np.ndim(t) == 0 else out

    def check_bounds(self, grid: Sequence[float], tol: float = 1e-12) -> None:
        """Raise ``ValueError`` if the declared bounds are beaten on ``grid``."""
        grid = np.asarray(grid, dtype=float)
        vals = np.linalg.norm(self(grid), axis=-1)
        if vals.max() > self.sup + tol:
            raise ValueError(
                f"reference sup {self.sup} exceeded: {vals.max()} at t={grid[vals.argmax()]}"
            )
        if self.deriv is not None:
            rates = np.linalg.norm(self.rate(grid), axis=-1)
            if rates.max() > self.rate_sup + tol:
                raise ValueError(
                    f"reference rate bound {self.rate_sup} exceeded: {rates.max()}"
                )


def constant_reference(value) -> ReferenceSignal:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return ReferenceSignal(
        fn=lambda t: np.broadcast_to(v, (np.size(t), v.size)),
        deriv=lambda t: np.zeros((np.size(t), v.size)),
        m=v.size,
        sup=float(np.linalg.norm(v)),
        rate_sup=0.0,
        label="constant",
    )


def cosine_reference(amplitude=1.0, omega=1.0, phase=0.0, offset=0.0) -> ReferenceSignal:
    """Scalar ``amplitude * cos(omega t + phase) + offset``."""
    A, w = float(amplitude), float(omega)
    return ReferenceSignal(
        fn=lambda t: (A * np.cos(w * t + phase) + offset)[:, None],
        deriv=lambda t: (-A * w * np.sin(w * t + phase))[:, None],
        m=1,
        sup=abs(A) + abs(offset),
        rate_sup=abs(A * w),
        label="cos",
    )


def in_funnel(spec: FunnelSpec, y_ref: ReferenceSignal, t: float, y) -> bool:
    if t < 0:
        raise DomainError(f"negative time {t}")
    err = np.linalg.norm(np.atleast_1d(y) - y_ref(t))
    return bool(err < funnel_value(spec, t))


@dataclass(frozen=True)
class SignalSample:
    """One learning sample.

    ``u_fmpc``/``u_fc`` are the inputs held from ``t`` onward.  They are
    ``None`` only on the most recent sample of a log, whose input has not
    been decided yet when learning runs; no transition leaves that sample.
    """

    t: float
    y: np.ndarray
    y_M: np.ndarray
    u_fmpc: Optional[np.ndarray] = None
    u_fc: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("y", "y_M", "u_fmpc", "u_fc"):
            val = getattr(self, name)
            if val is None:
                continue
            arr = np.atleast_1d(np.asarray(val, dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name} in sample at t={self.t}")
            object.__setattr__(self, name, arr)

    @property
    def pending(self) -> bool:
        return self.u_fmpc is None or self.u_fc is None

    @property
    def u(self) -> np.ndarray:
        return self.u_fmpc + self.u_fc


@dataclass
class DataLog:
    """Append-only record of samples at uniform spacing ``tau``."""

    tau: float
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("sampling period must be positive")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    def append(self, sample: SignalSample) -> None:
        if self.samples:
            last = self.samples[-1]
            if last.pending:
                raise ValueError("cannot append after a pending sample; complete it first")
            if abs(sample.t - last.t - self.tau) > 1e-12:
                raise ValueError(
                    f"sample spacing {sample.t - last.t} differs from tau={self.tau}"
                )
        self.samples.append(sample)

    def complete_last(self, u_fmpc, u_fc) -> None:
        last = self.samples[-1]
        self.samples[-1] = SignalSample(last.t, last.y, last.y_M, u_fmpc, u_fc)

    def window(self, n: Optional[int]) -> "DataLog":
        """The last ``n`` samples (all if ``n`` is None)."""
        samples = self.samples if n is None else self.samples[-n:]
        return DataLog(self.tau, list(samples))

    def arrays(self):
        """Stacked ``(t, y, y_M, u)``; pending inputs become NaN rows."""
        t = np.array([s.t for s in self.samples])
        y = np.array([s.y for s in self.samples])
        yM = np.array([s.y_M for s in self.samples])
        m = y.shape[1] if y.ndim == 2 else 1
        u = np.array([s.u if not s.pending else np.full(m, np.nan) for s in self.samples])
        return t, y, yM, u


@dataclass(frozen=True)
class RunConfig:
    """Timing and weighting of one closed-loop run.

    ``u_bar`` may be zero so that a run with no input authority can be
    attempted and reported as infeasible instead of rejected at parse time.
    """

    delta: float
    horizon: float
    u_bar: float
    lambda_u: float
    tau: float
    learn_every: int
    t_end: float
    plant_step: float
    model_step: float
    seed: int = 0
    report_every: int = 1

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.horizon >= self.delta:
            raise ValueError("horizon must be at least delta")
        if self.u_bar < 0:
            raise ValueError("u_bar must be nonnegative")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be nonnegative")
        if self.learn_every < 1:
            raise ValueError("learn_every must be >= 1")
        _int_ratio(self.horizon, self.delta, "horizon/delta")
        _int_ratio(self.delta, self.tau, "delta/tau")
        _int_ratio(self.delta, self.plant_step, "delta/plant_step")
        _int_ratio(self.delta, self.model_step, "delta/model_step")
        if self.report_every < 1:
            raise ValueError("report_every must be >= 1")

    @property
    def n_pieces(self) -> int:
        return _int_ratio(self.horizon, self.delta, "horizon/delta")

    @property
    def n_steps(self) -> int:
        """Number of MPC intervals covering ``[0, t_end]``."""
        return int(math.ceil(self.t_end / self.delta - 1e-9))

    def t_k(self, k: int) -> float:
        return k * self.delta


def _int_ratio(num: float, den: float, what: str) -> int:
    if not den > 0:
        raise ValueError(f"{what}: denominator must be positive")
    r = num / den
    n = int(round(r))
    if n < 1 or abs(r - n) > 1e-9 * max(1.0, r):
        raise ValueError(f"{what} must be a positive integer, got {r}")
    return n
