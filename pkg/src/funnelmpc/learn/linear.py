"""Fitting linear surrogates inside the certified parameter set."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import optimize

from ..core import DataLog, FunnelSpec, ReferenceSignal
from .certify import ClassBounds, KReport, admissible_d1_bound, check_K_membership
from .surrogate import LinearSurrogate

log = logging.getLogger(__name__)

BLOCKS = ("R", "S", "gamma", "D1", "Q", "P", "D2", "eta0")


@dataclass(frozen=True)
class LearnScheme:
    """Which data and objective a learning step uses.

    kinds: ``mhe`` (window of ``window`` samples, all if None),
    ``last_point`` (one transition), ``regularized`` (mhe plus weighted
    Frobenius distances to ``anchor`` or to the previous model) and
    ``graybox`` (physical-parameter fit, see ``graybox``).
    """

    kind: str
    window: Optional[int] = None
    weights: Optional[Sequence[float]] = None
    anchor: Optional[LinearSurrogate] = None
    reg_weights: Dict[str, float] = field(default_factory=dict)
    fix_gamma: bool = False
    restarts: int = 3
    seed: int = 0
    max_iter: int = 200
    param_box: Optional[dict] = None
    z0_box: Optional[Sequence[tuple]] = None

    def __post_init__(self):
        if self.kind not in ("mhe", "last_point", "regularized", "graybox", "none"):
            raise ValueError(f"unknown learning scheme {self.kind!r}")
        if self.weights is not None and np.any(np.asarray(self.weights) < 0):
            raise ValueError("weights must be nonnegative")
        if any(v < 0 for v in self.reg_weights.values()):
            raise ValueError("regularisation weights must be nonnegative")
        if self.window is not None and self.window < 2:
            raise ValueError("window must hold at least two samples")


@dataclass
class LearnResult:
    model: LinearSurrogate
    J: float
    J_prev: float
    report: KReport
    fallback: bool = False
    message: str = ""


def _clip_singular(A, upper=None, lower=None):
    if A.size == 0:
        return A
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if upper is not None:
        s = np.minimum(s, upper)
    if lower is not None:
        s = np.maximum(s, lower)
    return (U * s) @ Vt


def _clip_ball(v, r):
    n = np.linalg.norm(v)
    if n > r:
        return v * (r / n)
    return v


def _psd_sqrt(A):
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


# Smooth bijections from unconstrained coordinates onto the open norm balls
# (or, for gamma, onto matrices with all singular values above a floor).
# Fitting in these coordinates keeps every iterate certified without
# projections, which otherwise stall on the bilinear S-eta coupling.
_SHRINK = 1 - 1e-9


def _sv_map(W, fn):
    if W.size == 0:
        return W
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    return (U * fn(s)) @ Vt


def _to_ball_mat(W, c):
    return _sv_map(W, lambda s: c * s / np.sqrt(1 + s * s))


def _inv_ball_sv(s, c):
    t = np.minimum(s / c, _SHRINK)
    return t / np.sqrt(1 - t * t)


def _from_ball_mat(A, c):
    if c == 0:
        return np.zeros_like(A)
    return _sv_map(A, lambda s: _inv_ball_sv(s, c))


def _to_ball_vec(w, c):
    if not math.isfinite(c):
        return w
    return c * w / np.sqrt(1 + w @ w)


def _from_ball_vec(v, c):
    v = np.array(v, dtype=float)
    if not math.isfinite(c):
        return v
    n = float(np.linalg.norm(v))
    if n == 0 or c == 0:
        return np.zeros_like(v)
    return (v / n) * float(_inv_ball_sv(n, c))


class KParam:
    """Coordinates for linear surrogates inside the certified set.

    ``Q = -(L L^T + mu I)`` with ``mu >= mu_min(|D2|)`` keeps ``Q`` symmetric
    and its top eigenvalue admissible; the norm conditions on ``R``, ``S``,
    ``P``, ``D1``, ``D2``, ``eta0`` and ``gamma^{-1}`` hold through the
    smooth maps above.  ``theta`` is the raw block vector, ``omega`` the
    unconstrained one.
    """

    def __init__(self, m, nu, bounds: ClassBounds, funnel, reference, fixed_gamma=None):
        self.m, self.nu = m, nu
        self.bounds = bounds
        self.fixed_gamma = None if fixed_gamma is None else np.asarray(fixed_gamma, float)
        sizes = [("R", m * m), ("S", m * nu)]
        if self.fixed_gamma is None:
            sizes.append(("gamma", m * m))
        sizes += [("D1", m), ("L", nu * nu), ("mu", 1 if nu else 0), ("P", nu * m),
                  ("D2", nu), ("eta0", nu)]
        self.slices = {}
        i = 0
        for name, n in sizes:
            self.slices[name] = slice(i, i + n)
            i += n
        self.size = i
        self.d1_max = admissible_d1_bound(bounds, funnel, reference)
        if self.d1_max < 0:
            raise ValueError(
                f"certified set is empty: admissible |D1| bound is {self.d1_max:.6g} < 0")
        if self.fixed_gamma is not None and bounds.gamma_bar * np.linalg.svd(
                np.atleast_2d(self.fixed_gamma), compute_uv=False).min() < 1 - 1e-12:
            raise ValueError("fixed gamma violates the |gamma^-1| bound")

    def _get(self, th, name, shape):
        return np.asarray(th[self.slices[name]]).reshape(shape)

    def to_model(self, th) -> LinearSurrogate:
        m, nu = self.m, self.nu
        gamma = self.fixed_gamma if self.fixed_gamma is not None else self._get(th, "gamma", (m, m))
        if nu:
            L = self._get(th, "L", (nu, nu))
            mu = th[self.slices["mu"]][0]
            Q = -(L @ L.T + mu * np.eye(nu))
        else:
            Q = np.zeros((0, 0))
        return LinearSurrogate(self._get(th, "R", (m, m)), self._get(th, "S", (m, nu)), gamma,
                               self._get(th, "D1", (m,)), 0.5 * (Q + Q.T),
                               self._get(th, "P", (nu, m)), self._get(th, "D2", (nu,)),
                               self._get(th, "eta0", (nu,)))

    def from_model(self, model: LinearSurrogate) -> np.ndarray:
        """Raw coordinates of the nearest certified model (by blockwise clipping)."""
        th = np.zeros(self.size)
        sl = self.slices
        th[sl["R"]] = model.R.ravel()
        th[sl["S"]] = model.S.ravel()
        if "gamma" in sl:
            th[sl["gamma"]] = model.gamma_mat.ravel()
        th[sl["D1"]] = model.D1
        if self.nu:
            A = -model.Q
            mu = float(np.linalg.eigvalsh(A)[0])
            th[sl["L"]] = _psd_sqrt(A - mu * np.eye(self.nu)).ravel()
            th[sl["mu"]] = mu
        th[sl["P"]] = model.P.ravel()
        th[sl["D2"]] = model.D2
        th[sl["eta0"]] = model.eta0
        return self.project(th)

    def project(self, th) -> np.ndarray:
        b = self.bounds
        m, nu = self.m, self.nu
        th = np.array(th, dtype=float)
        sl = self.slices
        th[sl["R"]] = _clip_singular(self._get(th, "R", (m, m)), upper=b.r_bar).ravel()
        th[sl["S"]] = _clip_singular(self._get(th, "S", (m, nu)), upper=b.s_bar).ravel()
        if "gamma" in sl and b.gamma_bar > 0:
            g = _clip_singular(self._get(th, "gamma", (m, m)), lower=1.0 / b.gamma_bar)
            th[sl["gamma"]] = g.ravel()
        th[sl["D1"]] = _clip_ball(th[sl["D1"]], self.d1_max)
        if nu:
            if math.isfinite(b.d2_bar):
                th[sl["D2"]] = _clip_ball(th[sl["D2"]], b.d2_bar)
            mu_min = b.mu_min(float(np.linalg.norm(th[sl["D2"]])))
            th[sl["mu"]] = max(th[sl["mu"]][0], mu_min)
            th[sl["P"]] = _clip_singular(self._get(th, "P", (nu, m)), upper=b.p_bar).ravel()
            th[sl["eta0"]] = _clip_ball(th[sl["eta0"]], b.eta_bar)
        return th

    def theta(self, w) -> np.ndarray:
        """Unconstrained coordinates to raw certified coordinates."""
        b = self.bounds
        m, nu = self.m, self.nu
        sl = self.slices
        th = np.array(w, dtype=float)
        th[sl["R"]] = _to_ball_mat(self._get(w, "R", (m, m)), b.r_bar).ravel()
        th[sl["S"]] = _to_ball_mat(self._get(w, "S", (m, nu)), b.s_bar).ravel()
        if "gamma" in sl:
            g = _sv_map(self._get(w, "gamma", (m, m)), lambda s: np.sqrt(1 + s * s) / b.gamma_bar)
            th[sl["gamma"]] = g.ravel()
        th[sl["D1"]] = _to_ball_vec(w[sl["D1"]], self.d1_max)
        if nu:
            th[sl["D2"]] = _to_ball_vec(w[sl["D2"]], b.d2_bar)
            mu_min = b.mu_min(float(np.linalg.norm(th[sl["D2"]])))
            th[sl["mu"]] = mu_min + math.exp(min(w[sl["mu"]][0], 700.0))
            th[sl["P"]] = _to_ball_mat(self._get(w, "P", (nu, m)), b.p_bar).ravel()
            th[sl["eta0"]] = _to_ball_vec(w[sl["eta0"]], b.eta_bar)
        return th

    def omega(self, th) -> np.ndarray:
        """Inverse of ``theta`` (boundary points are pulled just inside)."""
        b = self.bounds
        m, nu = self.m, self.nu
        sl = self.slices
        th = self.project(th)
        w = th.copy()
        w[sl["R"]] = _from_ball_mat(self._get(th, "R", (m, m)), b.r_bar).ravel()
        w[sl["S"]] = _from_ball_mat(self._get(th, "S", (m, nu)), b.s_bar).ravel()
        if "gamma" in sl:
            g = _sv_map(self._get(th, "gamma", (m, m)),
                        lambda s: np.sqrt(np.maximum((b.gamma_bar * s) ** 2 - 1, 0.0)))
            w[sl["gamma"]] = g.ravel()
        w[sl["D1"]] = _from_ball_vec(th[sl["D1"]], self.d1_max)
        if nu:
            w[sl["D2"]] = _from_ball_vec(th[sl["D2"]], b.d2_bar)
            mu_min = b.mu_min(float(np.linalg.norm(th[sl["D2"]])))
            w[sl["mu"]] = math.log(max(th[sl["mu"]][0] - mu_min, 1e-6 * (1 + mu_min)))
            w[sl["P"]] = _from_ball_mat(self._get(th, "P", (nu, m)), b.p_bar).ravel()
            w[sl["eta0"]] = _from_ball_vec(th[sl["eta0"]], b.eta_bar)
        return w

    def thetas(self, W) -> np.ndarray:
        """Batched ``theta`` over the rows of ``W``."""
        b = self.bounds
        m, nu = self.m, self.nu
        sl = self.slices
        W = np.atleast_2d(W)
        B = len(W)
        TH = W.copy()

        def sv(name, shape, fn):
            if sl[name].stop > sl[name].start:
                X = W[:, sl[name]].reshape((B,) + shape)
                U, s_, Vt = np.linalg.svd(X, full_matrices=False)
                TH[:, sl[name]] = np.einsum("bik,bk,bkj->bij", U, fn(s_), Vt).reshape(B, -1)

        def ball(name, c):
            if math.isfinite(c):
                X = W[:, sl[name]]
                TH[:, sl[name]] = c * X / np.sqrt(1 + np.sum(X * X, axis=1, keepdims=True))

        sv("R", (m, m), lambda s_: b.r_bar * s_ / np.sqrt(1 + s_ * s_))
        sv("S", (m, nu), lambda s_: b.s_bar * s_ / np.sqrt(1 + s_ * s_))
        if "gamma" in sl:
            sv("gamma", (m, m), lambda s_: np.sqrt(1 + s_ * s_) / b.gamma_bar)
        ball("D1", self.d1_max)
        if nu:
            ball("D2", b.d2_bar)
            d2n = np.linalg.norm(TH[:, sl["D2"]], axis=1)
            mu_min = (b.p_bar * b.rho_bar + d2n) / b.eta_bar if b.eta_bar > 0 else np.full(B, np.inf)
            TH[:, sl["mu"]] = (mu_min + np.exp(np.minimum(W[:, sl["mu"]][:, 0], 700.0)))[:, None]
            sv("P", (nu, m), lambda s_: b.p_bar * s_ / np.sqrt(1 + s_ * s_))
            ball("eta0", b.eta_bar)
        return TH

    def systems(self, TH):
        """Stacked ``(A, B, c, eta0)`` for a batch of raw parameter vectors."""
        m, nu = self.m, self.nu
        sl = self.slices
        TH = np.atleast_2d(TH)
        nb = len(TH)
        n = m + nu
        A = np.zeros((nb, n, n))
        A[:, :m, :m] = TH[:, sl["R"]].reshape(nb, m, m)
        Bm = np.zeros((nb, n, m))
        if self.fixed_gamma is not None:
            Bm[:, :m] = self.fixed_gamma
        else:
            Bm[:, :m] = TH[:, sl["gamma"]].reshape(nb, m, m)
        c = np.zeros((nb, n))
        c[:, :m] = TH[:, sl["D1"]]
        if nu:
            A[:, :m, m:] = TH[:, sl["S"]].reshape(nb, m, nu)
            L = TH[:, sl["L"]].reshape(nb, nu, nu)
            A[:, m:, m:] = -(L @ np.swapaxes(L, 1, 2)) - TH[:, sl["mu"]][:, :, None] * np.eye(nu)
            A[:, m:, :m] = TH[:, sl["P"]].reshape(nb, nu, m)
            c[:, m:] = TH[:, sl["D2"]]
        return A, Bm, c, TH[:, sl["eta0"]]


def _rk4_maps(A, Bm, c, tau, substeps):
    """Exact ``substeps``-fold RK4 map ``x -> Phi x + G u + k`` of an affine system.

    For ``x' = A x + B u + c`` one RK4 step of size ``h`` is
    ``x + h (A x + v) * poly`` with polynomials in ``hA``; composing those in
    closed form reproduces step-by-step integration up to rounding.
    """
    h = tau / substeps
    n = A.shape[-1]
    I = np.eye(n)
    hA = h * A
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    T = I + hA + hA2 / 2 + hA3 / 6 + hA3 @ hA / 24
    Pm = h * (I + hA / 2 + hA2 / 6 + hA3 / 24)
    Phi = np.broadcast_to(I, A.shape).copy()
    S = np.zeros_like(A)
    for _ in range(substeps):
        S = S + Phi
        Phi = T @ Phi
    W = S @ Pm
    return Phi, W @ Bm, np.einsum("bij,bj->bi", W, c)


def _zoh_rollout(A, Bm, c, z0, U, tau, substeps):
    """States after each of the held inputs ``U[i]`` (batched systems)."""
    with np.errstate(over="ignore", invalid="ignore"):
        Phi, G, k = _rk4_maps(A, Bm, c, tau, substeps)
        x = z0
        out = [x]
        for u in U:
            x = np.einsum("bij,bj->bi", Phi, x) + G @ u + k
            out.append(x)
    return np.stack(out, axis=1)


class _Objective:
    """Scheme objective as a function of unconstrained coordinates."""

    def __init__(self, par: KParam, log_: DataLog, scheme: LearnScheme, prev, substeps):
        t, y, yM, u = log_.arrays()
        self.par = par
        self.y = y
        self.u = u[:-1]
        self.tau = log_.tau
        self.substeps = substeps
        self.sw = np.sqrt(_weights(scheme, len(y)))
        self.reg = {}
        if scheme.kind == "regularized":
            anchor = scheme.anchor if scheme.anchor is not None else prev
            self.reg = {k: (v, anchor.blocks()[k]) for k, v in scheme.reg_weights.items() if v > 0}

    def residuals(self, W):
        W = np.atleast_2d(W)
        TH = self.par.thetas(W)
        A, Bm, c, eta0 = self.par.systems(TH)
        m = self.par.m
        z0 = np.concatenate([np.broadcast_to(self.y[0], (len(W), m)), eta0], axis=1)
        Z = _zoh_rollout(A, Bm, c, z0, self.u, self.tau, self.substeps)
        r = (Z[:, :, :m] - self.y[None]) * self.sw[None, :, None]
        r = r.reshape(len(W), -1)
        return np.where(np.isfinite(r), r, 1e150), TH

    def value(self, W):
        r, TH = self.residuals(W)
        with np.errstate(over="ignore", invalid="ignore"):
            J = np.einsum("bi,bi->b", r, r)
        if self.reg:
            for i, th in enumerate(TH):
                blocks = self.par.to_model(th).blocks()
                for k, (wk, ref) in self.reg.items():
                    J[i] += wk * float(np.linalg.norm(blocks[k] - ref))
        return np.where(np.isfinite(J), J, np.inf)

    def _stencil(self, w, rel=1e-6):
        h = rel * np.maximum(1.0, np.abs(w))
        E = np.diag(h)
        return np.vstack([w + E, w - E]), h

    def jac(self, w):
        W, h = self._stencil(w)
        r, _ = self.residuals(W)
        p = w.size
        return ((r[:p] - r[p:]) / (2 * h)[:, None]).T

    def value_grad(self, w):
        W, h = self._stencil(w)
        v = self.value(np.vstack([w[None], W]))
        p = w.size
        return v[0], (v[1:p + 1] - v[p + 1:]) / (2 * h)


def _weights(scheme, n):
    if scheme.weights is None:
        return np.ones(n)
    w = np.asarray(scheme.weights, dtype=float)
    return w[-n:] if w.size >= n else np.concatenate([np.ones(n - w.size), w])


def _fit(obj: _Objective, w0, max_iter):
    """Local minimisation from ``w0``; returns ``(omega, J)``."""
    if obj.reg:
        res = optimize.minimize(obj.value_grad, w0, jac=True, method="L-BFGS-B",
                                options=dict(maxiter=max_iter, ftol=1e-15, gtol=1e-12))
        return res.x, float(obj.value(res.x)[0])
    if obj.y.size == 0 or w0.size == 0:
        return w0, float(obj.value(w0)[0])
    n_res = obj.sw.size * obj.par.m
    method = "lm" if n_res >= w0.size else "trf"
    res = optimize.least_squares(lambda w: obj.residuals(w)[0][0], w0, jac=obj.jac,
                                 method=method, xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                 max_nfev=max_iter * (1 if method == "trf" else w0.size + 1))
    return res.x, float(obj.value(res.x)[0])


def learn_linear(log_: DataLog, scheme: LearnScheme, bounds: ClassBounds, funnel: FunnelSpec,
                 reference: ReferenceSignal, prev: LinearSurrogate,
                 model_step: Optional[float] = None) -> LearnResult:
    """Fit a certified linear surrogate to logged data.

    The previous model always competes, so the returned objective never
    exceeds its objective when it is itself a member of the set.
    """
    if scheme.kind == "last_point":
        data = log_.window(2)
    elif scheme.kind in ("mhe", "regularized"):
        data = log_.window(scheme.window)
    else:
        raise ValueError(f"learn_linear does not handle scheme {scheme.kind!r}")
    rep_prev = check_K_membership(prev, bounds, funnel, reference)
    if len(data) < 2:
        return LearnResult(prev, 0.0, 0.0, rep_prev, message="no data")
    substeps = 1 if model_step is None else max(1, int(round(data.tau / model_step)))
    J_prev = objective_value(data, scheme, prev, model_step=model_step, prev=prev)
    try:
        par = KParam(prev.m, prev.nu, bounds, funnel, reference,
                     fixed_gamma=prev.gamma_mat if scheme.fix_gamma else None)
        obj = _Objective(par, data, scheme, prev, substeps)
        w_prev = par.omega(par.from_model(prev))
        rng = np.random.default_rng(scheme.seed)
        negligible = 1e-16 * max(1.0, float(np.sum(obj.y ** 2)))
        starts = [w_prev] + [w_prev + rng.normal(size=w_prev.size) for _ in range(scheme.restarts)]
        best = None
        for w0 in starts:
            w, f = _fit(obj, w0, scheme.max_iter)
            if best is None or f < best[1]:
                best = (w, f)
            if f <= negligible:
                break
        w, f = best
        model = par.to_model(par.theta(w))
        rep = check_K_membership(model, bounds, funnel, reference)
        if not rep.member or not np.isfinite(f):
            raise RuntimeError("fit left the certified set: " + ", ".join(rep.failed()))
        if rep_prev.member and f > J_prev:
            return LearnResult(prev, J_prev, J_prev, rep_prev, message="previous model kept")
        return LearnResult(model, float(f), J_prev, rep)
    except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        log.warning("linear learning failed, keeping previous model: %s", exc)
        return LearnResult(prev, J_prev, J_prev, rep_prev, fallback=True, message=str(exc))


def objective_value(log_: DataLog, scheme: LearnScheme, model: LinearSurrogate,
                    model_step=None, prev: Optional[LinearSurrogate] = None) -> float:
    """Objective of ``model`` on the scheme's data window (no projection)."""
    data = log_.window(2) if scheme.kind == "last_point" else log_.window(scheme.window)
    if len(data) < 2:
        return 0.0
    substeps = 1 if model_step is None else max(1, int(round(data.tau / model_step)))
    A, Bm, c = model._A[None], model._B[None], model._c[None]
    t, y, yM, u = data.arrays()
    z0 = np.concatenate([y[0], model.eta0])[None]
    Z = _zoh_rollout(A, Bm, c, z0, u[:-1], data.tau, substeps)
    w = _weights(scheme, len(y))
    r = (Z[0, :, : model.m] - y) * np.sqrt(w)[:, None]
    J = float(np.sum(r * r))
    if scheme.kind == "regularized":
        anchor = scheme.anchor if scheme.anchor is not None else prev
        for k, wk in scheme.reg_weights.items():
            J += wk * float(np.linalg.norm(model.blocks()[k] - anchor.blocks()[k]))
    return J
