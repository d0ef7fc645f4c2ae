"""Certification of surrogate models against the feasible model class.

The parameter set is the product of norm balls and spectral conditions
bounding the linear surrogate; a member is guaranteed trackable with inputs
bounded by ``u_bar``.  Matrix norms are spectral norms throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..core import FunnelSpec, ReferenceSignal, funnel_derivative_bound, funnel_value
from .surrogate import LinearSurrogate, SurrogateModel


@dataclass(frozen=True)
class ClassBounds:
    r_bar: float
    s_bar: float
    gamma_bar: float
    p_bar: float
    eta_bar: float
    rho_bar: float
    u_bar: float
    d2_bar: float = math.inf

    def __post_init__(self):
        for name in ("r_bar", "s_bar", "gamma_bar", "p_bar", "eta_bar", "d2_bar"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.rho_bar > 0:
            raise ValueError("rho_bar must be positive")
        if not self.u_bar > 0:
            raise ValueError("u_bar must be positive")

    def d1_max(self, funnel: FunnelSpec, reference: ReferenceSignal) -> float:
        return admissible_d1_bound(self, funnel, reference)

    def mu_min(self, d2_norm: float) -> float:
        """Smallest admissible ``-lambda_max(Q)`` for a given ``|D2|``."""
        num = self.p_bar * self.rho_bar + d2_norm
        if self.eta_bar == 0:
            return math.inf if num > 0 else 0.0
        return num / self.eta_bar


def rho_bar(funnel: FunnelSpec, reference: ReferenceSignal) -> float:
    """Radius of the smallest origin ball containing every funnel cross-section.

    ``|y_ref|_inf + psi(0)`` bounds ``sup_t |y_ref(t)| + psi(t)`` because the
    built-in funnels are nonincreasing.
    """
    return reference.sup + funnel_value(funnel, 0.0)


def rho_bar_on_grid(funnel: FunnelSpec, reference: ReferenceSignal, t_max: float = 20.0,
                    n: int = 200001) -> float:
    t = np.linspace(0.0, t_max, n)
    return float(np.max(np.linalg.norm(reference(t), axis=-1) + funnel_value(funnel, t)))


def spectral_norm(A) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    return float(np.linalg.norm(A, 2))


def inverse_norm(A) -> float:
    """``|A^{-1}|`` as ``1 / sigma_min``; ``inf`` for singular ``A``."""
    s = np.linalg.svd(np.atleast_2d(np.asarray(A, dtype=float)), compute_uv=False)
    smin = s.min()
    return math.inf if smin <= 1e-300 else 1.0 / smin


def lambda_max_sym(Q) -> float:
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.size == 0:
        return -math.inf
    return float(np.linalg.eigvalsh(0.5 * (Q + Q.T))[-1])


def admissible_d1_bound(bounds: ClassBounds, funnel: FunnelSpec,
                        reference: ReferenceSignal) -> float:
    """Largest ``|D1|`` allowed by the input-bound condition of the set."""
    if bounds.gamma_bar == 0:
        return -math.inf
    return (bounds.u_bar / bounds.gamma_bar - funnel_derivative_bound(funnel)
            - reference.rate_sup - bounds.r_bar * bounds.rho_bar
            - bounds.s_bar * bounds.eta_bar)


CONDITIONS = ("R", "S", "gamma_inv", "u_bound", "lambda_Q", "P", "eta0")


@dataclass
class KReport:
    member: bool
    residuals: Dict[str, float]
    notes: List[str] = field(default_factory=list)
    vacuous: tuple = ()
    tol: float = 0.0

    def failed(self) -> List[str]:
        return [k for k in CONDITIONS if k not in self.vacuous and not self.residuals[k] >= -self.tol]

    def lines(self) -> List[str]:
        out = []
        for k in CONDITIONS:
            tag = "vacuous" if k in self.vacuous else ("ok" if self.residuals[k] >= -self.tol
                                                       else "FAIL")
            out.append(f"{k:10s} slack={self.residuals[k]: .6g}  {tag}")
        return out + [f"note: {n}" for n in self.notes]


def check_K_membership(model: LinearSurrogate, bounds: ClassBounds, funnel: FunnelSpec,
                       reference: ReferenceSignal, tol: float = 1e-10) -> KReport:
    """Signed slack of each defining inequality (negative = violated)."""
    b = bounds
    res = {}
    res["R"] = b.r_bar - spectral_norm(model.R)
    res["S"] = b.s_bar - spectral_norm(model.S)
    res["gamma_inv"] = b.gamma_bar - inverse_norm(model.gamma_mat)
    d1 = float(np.linalg.norm(model.D1))
    res["u_bound"] = admissible_d1_bound(b, funnel, reference) - d1
    d2 = float(np.linalg.norm(model.D2))
    res["lambda_Q"] = -b.mu_min(d2) - lambda_max_sym(model.Q)
    res["P"] = b.p_bar - spectral_norm(model.P)
    res["eta0"] = b.eta_bar - float(np.linalg.norm(model.eta0))
    notes, vac = [], ()
    if model.nu == 0:
        vac = ("S", "lambda_Q", "P", "eta0")
        notes.append("no internal dynamics: S, Q, P, eta0 conditions hold vacuously")
    if d2 > b.d2_bar:
        notes.append(f"|D2|={d2:.6g} exceeds configured d2_bar={b.d2_bar:.6g}")
    # tolerance scaled per condition so that zero-slack members are accepted
    scale = max(1.0, b.u_bar, b.rho_bar)
    t = tol * scale
    ok = all((k in vac) or (np.isfinite(res[k]) and res[k] >= -t) or res[k] == math.inf
             for k in CONDITIONS)
    ok = ok and d2 <= b.d2_bar
    return KReport(ok, res, notes, vac, t)


@dataclass(frozen=True)
class Certificate:
    G_max_bound: float
    P_max_bound: float
    required_u: float
    u_bar: float
    exact: bool

    @property
    def passes(self) -> bool:
        return bool(self.required_u <= self.u_bar * (1 + 1e-12))

    @property
    def slack(self) -> float:
        return self.u_bar - self.required_u


def _sample_domain(bounds: ClassBounds, funnel, reference, m, nu, n, rng, t_max=10.0):
    t = rng.uniform(0.0, t_max, n)
    t[: n // 10] = 0.0
    dirs = rng.normal(size=(n, m))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = funnel_value(funnel, t) * rng.uniform(0, 1, n) ** (1.0 / m)
    rad[: n // 5] = funnel_value(funnel, t[: n // 5])
    rho = reference(t) + dirs * rad[:, None]
    if nu:
        ed = rng.normal(size=(n, nu))
        ed /= np.linalg.norm(ed, axis=1, keepdims=True)
        er = bounds.eta_bar * rng.uniform(0, 1, n) ** (1.0 / nu)
        er[: n // 5] = bounds.eta_bar
        eta = ed * er[:, None]
    else:
        eta = np.zeros((n, 0))
    return rho, eta


def m_ubar_certificate(model: SurrogateModel, bounds: ClassBounds, funnel: FunnelSpec,
                       reference: ReferenceSignal, G_max: Optional[float] = None,
                       P_max: Optional[float] = None, n_samples: int = 20000,
                       seed: int = 0) -> Certificate:
    """Input-bound certificate ``G_max (P_max + |psi'| + |y_ref'|) <= u_bar``.

    Linear surrogates get exact norm bounds.  For other models, maxima not
    supplied by the caller are estimated on random samples of the domain,
    which can only falsify, never prove.
    """
    rate = funnel_derivative_bound(funnel) + reference.rate_sup
    exact = True
    if isinstance(model, LinearSurrogate):
        G = inverse_norm(model.gamma_mat) if G_max is None else G_max
        P = (spectral_norm(model.R) * bounds.rho_bar + spectral_norm(model.S) * bounds.eta_bar
             + float(np.linalg.norm(model.D1))) if P_max is None else P_max
    else:
        rng = np.random.default_rng(seed)
        rho, eta = _sample_domain(bounds, funnel, reference, model.m, model.nu, n_samples, rng)
        if G_max is None:
            g = np.asarray(model.gamma(rho, eta), dtype=float)
            s = np.linalg.svd(g.reshape(-1, model.m, model.m), compute_uv=False)
            G = float(np.max(1.0 / np.maximum(s.min(axis=1), 1e-300)))
            exact = False
        else:
            G = G_max
        if P_max is None:
            P = float(np.max(np.linalg.norm(np.asarray(model.p(rho, eta)), axis=-1)))
            exact = False
        else:
            P = P_max
    req = G * (P + rate) if np.isfinite(G) else math.inf
    return Certificate(G, P, req, bounds.u_bar, exact)


@dataclass
class InternalBoundReport:
    max_norm: float
    eta_bar: float
    violations: List[tuple]
    trials: int
    paths: Optional[dict] = None

    @property
    def ok(self) -> bool:
        return not self.violations


def random_funnel_paths(funnel, reference, m, trials, rng, n_modes=4, margin=1e-3):
    """Smooth random outputs strictly inside the funnel.

    Returns ``y(t)`` evaluating all paths at once with shape ``(trials, m)``.
    """
    amp = rng.normal(size=(trials, n_modes, m))
    omega = rng.uniform(0.1, 6.0, size=(trials, n_modes, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(trials, n_modes, 1))
    # a fifth of the paths hug the boundary in a fixed direction
    n_hug = max(1, trials // 5)
    hug = rng.normal(size=(n_hug, m))
    hug /= np.linalg.norm(hug, axis=1, keepdims=True)

    def y(t):
        v = np.sum(amp * np.sin(omega * t + phase), axis=1)
        v[:n_hug] = hug * 2.0
        nrm = np.linalg.norm(v, axis=1, keepdims=True)
        v = v / np.maximum(1.0, nrm)
        return reference(t) + (1 - margin) * funnel_value(funnel, t) * v

    return y


def verify_internal_bound(model: SurrogateModel, bounds: ClassBounds, funnel: FunnelSpec,
                          reference: ReferenceSignal, trials: int = 100, horizon: float = 5.0,
                          seed: int = 0, step: float = 0.01, keep_paths: bool = False,
                          tol: float = 1e-9) -> InternalBoundReport:
    """Falsification test of the internal-state bound by simulation."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    nu, m = model.nu, model.m
    if nu == 0:
        return InternalBoundReport(0.0, bounds.eta_bar, [], trials)
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(trials, nu))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = bounds.eta_bar * rng.uniform(0, 1, trials) ** (1.0 / nu)
    r[: max(1, trials // 4)] = bounds.eta_bar
    eta = d * r[:, None]
    y_of = random_funnel_paths(funnel, reference, m, trials, rng)
    n = int(round(horizon / step))
    h = horizon / n
    max_norm = np.linalg.norm(eta, axis=1)
    viol = []
    ts, ys, etas = [], [], []
    for i in range(n + 1):
        t = i * h
        if keep_paths:
            ts.append(t)
            ys.append(y_of(t))
            etas.append(eta.copy())
        if i == n:
            break
        ya, yb, yc = y_of(t), y_of(t + 0.5 * h), y_of(t + h)
        k1 = model.q(ya, eta)
        k2 = model.q(yb, eta + 0.5 * h * k1)
        k3 = model.q(yb, eta + 0.5 * h * k2)
        k4 = model.q(yc, eta + h * k3)
        eta = eta + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        nrm = np.linalg.norm(eta, axis=1)
        max_norm = np.maximum(max_norm, np.where(np.isfinite(nrm), nrm, np.inf))
    for j in np.flatnonzero(max_norm > bounds.eta_bar + tol):
        viol.append((int(j), float(max_norm[j])))
    paths = None
    if keep_paths:
        paths = dict(t=np.array(ts), y=np.array(ys), eta=np.array(etas))
    return InternalBoundReport(float(max_norm.max()), bounds.eta_bar, viol, trials, paths)


def internal_decay_residual(model: LinearSurrogate, bounds: ClassBounds, y, eta) -> np.ndarray:
    """``eta.q - |eta| (lambda_max(Q) |eta| + p_bar rho_bar + |D2|)``; nonpositive for members."""
    eta = np.asarray(eta, dtype=float)
    nrm = np.linalg.norm(eta, axis=-1)
    lhs = np.einsum("...i,...i->...", eta, model.q(np.asarray(y, dtype=float), eta))
    lam = lambda_max_sym(model.Q)
    rhs = nrm * (lam * nrm + bounds.p_bar * bounds.rho_bar + float(np.linalg.norm(model.D2)))
    return lhs - rhs


def _rand_with_norm(rng, shape, r):
    A = rng.normal(size=shape)
    n = spectral_norm(A) if len(shape) == 2 else float(np.linalg.norm(A))
    return A * (r / n) if n > 0 else A


def sample_members(bounds: ClassBounds, funnel: FunnelSpec, reference: ReferenceSignal, m: int,
                   nu: int, n: int, seed: int = 0, inflate: float = 1.25,
                   max_draws: int = 1_000_000) -> List[LinearSurrogate]:
    """Rejection-sample ``n`` members.

    Each block is drawn with its norm uniform on ``[0, inflate * bound]``
    and the candidate is kept only if it passes ``check_K_membership``.
    """
    rng = np.random.default_rng(seed)
    d1_cap = max(admissible_d1_bound(bounds, funnel, reference), 0.0)
    d2_cap = min(bounds.d2_bar, 1.0 + bounds.p_bar * bounds.rho_bar)
    out = []
    for _ in range(max_draws):
        if len(out) == n:
            break
        u = lambda: rng.uniform(0.0, inflate)
        R = _rand_with_norm(rng, (m, m), u() * bounds.r_bar)
        S = _rand_with_norm(rng, (m, nu), u() * bounds.s_bar) if nu else np.zeros((m, 0))
        g_min = 1.0 / (bounds.gamma_bar * u()) if bounds.gamma_bar > 0 else 1.0
        V, _ = np.linalg.qr(rng.normal(size=(m, m)))
        W, _ = np.linalg.qr(rng.normal(size=(m, m)))
        sv = g_min * (1.0 + rng.uniform(0.0, 2.0, m))
        sv[0] = g_min
        gamma = (V * sv) @ W.T
        D1 = _rand_with_norm(rng, (m,), u() * d1_cap)
        D2 = _rand_with_norm(rng, (nu,), u() * d2_cap) if nu else np.zeros(0)
        P = _rand_with_norm(rng, (nu, m), u() * bounds.p_bar) if nu else np.zeros((0, m))
        eta0 = _rand_with_norm(rng, (nu,), u() * bounds.eta_bar) if nu else np.zeros(0)
        if nu:
            mu = bounds.mu_min(float(np.linalg.norm(D2))) * u()
            L = rng.normal(size=(nu, nu))
            Q = -(L @ L.T + mu * np.eye(nu))
        else:
            Q = np.zeros((0, 0))
        cand = LinearSurrogate(R, S, gamma, D1, Q, P, D2, eta0)
        if check_K_membership(cand, bounds, funnel, reference, tol=0.0).member:
            out.append(cand)
    if len(out) < n:
        raise RuntimeError(f"only {len(out)} of {n} members accepted in {max_draws} draws")
    return out
