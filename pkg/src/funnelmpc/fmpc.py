"""Funnel MPC: barrier stage cost, shooting OCP and adaptive funnel."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import FunnelSpec, ReferenceSignal, funnel_value
from .integrate import rk4_step

log = logging.getLogger(__name__)


class InfeasibleStartError(RuntimeError):
    """The OCP was posed from outside the funnel."""


class OcpSolverError(RuntimeError):
    """No control with finite cost was found."""


class FunnelConsistencyError(RuntimeError):
    """Adaptive funnel is nonpositive somewhere on the grid."""


@dataclass(frozen=True)
class StageCostParams:
    lambda_u: float
    funnel: FunnelSpec
    reference: ReferenceSignal

    def __post_init__(self):
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be nonnegative")


def stage_cost(t: float, y_M, u, params: StageCostParams) -> float:
    e = np.atleast_1d(np.asarray(y_M, dtype=float)) - params.reference(t)
    nrm2 = float(e @ e)
    psi = funnel_value(params.funnel, t)
    if np.sqrt(nrm2) == psi:
        return np.inf
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return nrm2 / (psi * psi - nrm2) + params.lambda_u * float(u @ u)


@dataclass(frozen=True, eq=False)
class OcpProblem:
    """Receding-horizon problem on ``[t_k, t_k + horizon]``.

    ``x_init`` is the full model state; its output part equals the
    measured plant output.
    """

    model: object
    t_k: float
    x_init: np.ndarray
    horizon: float
    delta: float
    u_bar: float
    cost: StageCostParams
    model_step: float

    def __post_init__(self):
        object.__setattr__(self, "x_init", np.asarray(self.x_init, dtype=float))
        n = int(round(self.horizon / self.delta))
        s = int(round(self.delta / self.model_step))
        if n < 1 or abs(n * self.delta - self.horizon) > 1e-9 * self.horizon:
            raise ValueError("horizon must be an integer multiple of delta")
        if s < 1 or abs(s * self.model_step - self.delta) > 1e-9 * self.delta:
            raise ValueError("model_step must divide delta")
        object.__setattr__(self, "n_pieces", n)
        object.__setattr__(self, "substeps", s)
        h = self.delta / s
        t_grid = self.t_k + h * np.arange(n * s + 1)
        object.__setattr__(self, "t_grid", t_grid)
        object.__setattr__(self, "_psi", funnel_value(self.cost.funnel, t_grid))
        object.__setattr__(self, "_yref", self.cost.reference(t_grid))

    @property
    def y_init(self) -> np.ndarray:
        return np.atleast_1d(self.model.output(self.x_init))

    @property
    def m(self) -> int:
        return self.model.m


@dataclass
class OcpSolution:
    controls: np.ndarray
    cost: float
    t_grid: np.ndarray
    predicted_x: np.ndarray
    predicted_y: np.ndarray
    iterations: int = 0
    start_index: int = 0

    @property
    def predicted_eta(self) -> np.ndarray:
        return self.predicted_x[:, self.predicted_y.shape[1]:]


def rollout(problem: OcpProblem, U) -> np.ndarray:
    """Model states on the OCP grid for a batch of controls ``(B, N, m)``."""
    U = np.asarray(U, dtype=float)
    B = U.shape[0]
    s = problem.substeps
    h = problem.delta / s
    f = problem.model.field.fn
    x = np.broadcast_to(problem.x_init, (B, problem.x_init.size)).copy()
    X = np.empty((B, problem.n_pieces * s + 1, x.shape[1]))
    X[:, 0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(problem.n_pieces):
            u = U[:, i, :]
            for j in range(s):
                x = rk4_step(f, 0.0, x, u, h)
                X[:, i * s + j + 1] = x
    return X


def _costs_from_states(problem: OcpProblem, U, X) -> np.ndarray:
    h = problem.delta / problem.substeps
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        y = problem.model.output(X)
        e = y - problem._yref
        r2 = np.einsum("bgi,bgi->bg", e, e)
        psi2 = problem._psi ** 2
        inside = np.all(np.sqrt(r2) < problem._psi, axis=1) & np.all(np.isfinite(X), axis=(1, 2))
        bar = r2 / (psi2 - r2)
        barrier = h * (bar.sum(axis=1) - 0.5 * (bar[:, 0] + bar[:, -1]))
        effort = problem.cost.lambda_u * problem.delta * np.einsum("bni,bni->b", U, U)
        total = barrier + effort
    return np.where(inside, total, np.inf)


def ocp_costs(problem: OcpProblem, U) -> np.ndarray:
    """Objective for a batch of controls; ``inf`` marks funnel contact."""
    U = np.asarray(U, dtype=float)
    return _costs_from_states(problem, U, rollout(problem, U))


def ocp_cost(problem: OcpProblem, controls) -> float:
    return float(ocp_costs(problem, np.asarray(controls, dtype=float)[None])[0])


def project_controls(U, u_bar: float) -> np.ndarray:
    """Clip every piece onto the Euclidean ball of radius ``u_bar``."""
    U = np.array(U, dtype=float)
    if U.shape[-1] == 1:
        return np.clip(U, -u_bar, u_bar)
    nrm = np.linalg.norm(U, axis=-1, keepdims=True)
    scale = np.where(nrm > u_bar, u_bar / np.where(nrm > 0, nrm, 1.0) * (1 - 4e-16), 1.0)
    return U * scale


def _num_grad(fun, x, f0, rel=1e-6):
    n = x.size
    hs = rel * np.maximum(1.0, np.abs(x))
    E = np.diag(hs)
    vals = fun(np.vstack([x + E, x - E]))
    fp, fm = vals[:n], vals[n:]
    g = (fp - fm) / (2 * hs)
    fwd_only = np.isfinite(fp) & ~np.isfinite(fm)
    bwd_only = ~np.isfinite(fp) & np.isfinite(fm)
    g = np.where(fwd_only, (fp - f0) / hs, g)
    g = np.where(bwd_only, (f0 - fm) / hs, g)
    g = np.where(np.isfinite(g), g, 0.0)
    return g


@dataclass
class _Trace:
    rows: List[tuple] = field(default_factory=list)

    def add(self, start, it, cost, step):
        self.rows.append((start, it, cost, step))


def _descend(fun, project, x0, f0, u_bar, max_iter, rtol, trace=None, start=0, box=True):
    """Projected BFGS with feasibility-preserving backtracking.

    With ``box`` (scalar inputs) pieces pinned at the bound with an outward
    gradient are frozen for the quasi-Newton step.
    """
    x, f = x0.copy(), f0
    g = _num_grad(fun, x, f)
    H = None
    fresh = True
    n_ls = 12
    it = 0
    for it in range(1, max_iter + 1):
        if box:
            at_bound = np.abs(x) >= u_bar * (1 - 1e-12)
            active = at_bound & (np.sign(x) * g < 0) if u_bar > 0 else np.ones(x.size, bool)
        else:
            active = np.zeros(x.size, bool)
        if H is None:
            fresh = True
            gmax = np.abs(g[~active]).max(initial=0.0)
            if gmax == 0:
                break
            H = np.eye(x.size) * (0.1 * max(u_bar, 1.0) / gmax)
        d = np.zeros_like(x)
        free = ~active
        d[free] = -H[np.ix_(free, free)] @ g[free]
        if g @ d >= 0:
            H = np.eye(x.size) * (0.1 * max(u_bar, 1.0) / max(np.abs(g).max(), 1e-300))
            d = np.where(free, -H.diagonal() * g, 0.0)
        alphas = 0.5 ** np.arange(n_ls)
        cands = project(x[None] + alphas[:, None] * d[None])
        fc = fun(cands)
        armijo = fc <= f + 1e-4 * ((cands - x) @ g)
        ok = np.flatnonzero(np.isfinite(fc) & armijo & (fc <= f))
        if ok.size == 0:
            if not fresh:
                H = None
                continue
            if trace is not None:
                trace.add(start, it, f, 0.0)
            break
        fresh = False
        j = ok[0]
        x_new, f_new = cands[j], fc[j]
        g_new = _num_grad(fun, x_new, f_new)
        s, yv = x_new - x, g_new - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            I = np.eye(x.size)
            V = I - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        if trace is not None:
            trace.add(start, it, f, float(alphas[j]))
        if decrease <= rtol * max(abs(f), 1e-300):
            break
    return x, f, it


def _greedy_start(problem: OcpProblem, n_cand: int = 101, seed: int = 0) -> np.ndarray:
    """Piece-by-piece control that keeps the funnel ratio smallest.

    Each piece picks, among candidate inputs on the admissible set, the one
    whose worst ``|e|/psi`` over that piece (from the state reached so far)
    is smallest.  Cheap and usually feasible when the soft restoration is not.
    """
    m, N, s = problem.m, problem.n_pieces, problem.substeps
    u_bar = problem.u_bar
    if m == 1:
        cand = np.linspace(-u_bar, u_bar, n_cand)[:, None]
    else:
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(n_cand, m))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cand = np.vstack([np.zeros((1, m)), dirs * u_bar, dirs * 0.5 * u_bar])
    h = problem.delta / s
    f = problem.model.field.fn
    x = np.broadcast_to(problem.x_init, (len(cand), problem.x_init.size)).copy()
    U = np.zeros((N, m))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            xs = x
            worst = np.zeros(len(cand))
            for j in range(s):
                xs = rk4_step(f, 0.0, xs, cand, h)
                g = i * s + j + 1
                e = problem.model.output(xs) - problem._yref[g]
                r = np.linalg.norm(e, axis=-1) / problem._psi[g]
                worst = np.maximum(worst, np.where(np.isfinite(r), r, np.inf))
            b = int(np.argmin(worst))
            U[i] = cand[b]
            x = np.broadcast_to(xs[b], x.shape).copy()
    return U


def _restore_feasibility(problem: OcpProblem, U0, max_iter=100):
    """Drive the prediction strictly inside the funnel; None on failure."""
    shape = U0.shape
    kappa = 60.0

    def viol(flat):
        U = flat.reshape((-1,) + shape)
        X = rollout(problem, U)
        with np.errstate(over="ignore", invalid="ignore"):
            e = problem.model.output(X) - problem._yref
            r = np.linalg.norm(e, axis=-1) / problem._psi
            rmax = r.max(axis=1, keepdims=True)
            v = rmax[:, 0] + np.log(np.exp(kappa * (r - rmax)).sum(axis=1)) / kappa
        return np.where(np.isfinite(v), v, np.inf)

    x = U0.ravel().copy()
    fv = viol(x[None])[0]
    proj = lambda Z: project_controls(Z.reshape((-1,) + shape), problem.u_bar).reshape(Z.shape)
    for _ in range(max_iter):
        c = ocp_cost(problem, x.reshape(shape))
        if np.isfinite(c):
            return x.reshape(shape)
        g = _num_grad(viol, x, fv)
        gn = np.abs(g).max()
        if gn == 0 or not np.isfinite(fv):
            return None
        step = 0.2 * max(problem.u_bar, 1e-12) / gn
        alphas = step * 0.5 ** np.arange(10)
        cands = proj(x[None] - alphas[:, None] * g[None])
        fc = viol(cands)
        j = int(np.argmin(fc))
        if not fc[j] < fv:
            return None
        x, fv = cands[j], fc[j]
    return None


def solve_ocp(problem: OcpProblem, warm_start=None, max_iter: int = 200, rtol: float = 1e-8,
              trace: Optional[list] = None) -> OcpSolution:
    """Minimise the funnel cost over piecewise-constant controls.

    Starts from the warm start, zero control and a saturated proportional
    guess; keeps the lowest cost (ties go to the earliest start).
    """
    m, N = problem.m, problem.n_pieces
    y0 = problem.y_init
    e0 = y0 - problem._yref[0]
    if not np.linalg.norm(e0) < problem._psi[0]:
        raise InfeasibleStartError(
            f"OCP posed outside the funnel at t={problem.t_k}: |e|={np.linalg.norm(e0):.6g} "
            f">= psi={problem._psi[0]:.6g}")
    shape = (N, m)
    u_bar = problem.u_bar

    def fun(flat):
        return ocp_costs(problem, flat.reshape((-1,) + shape))

    def proj(Z):
        return project_controls(Z.reshape((-1,) + shape), u_bar).reshape(Z.shape)

    starts = []
    if warm_start is not None:
        starts.append(project_controls(np.asarray(warm_start, dtype=float).reshape(shape), u_bar))
    starts.append(np.zeros(shape))
    prop = -u_bar * e0 / problem._psi[0]
    starts.append(project_controls(np.broadcast_to(prop, shape), u_bar))

    tr = _Trace() if trace is not None else None
    f_starts = fun(np.stack([s.ravel() for s in starts]))
    finite = [i for i in range(len(starts)) if np.isfinite(f_starts[i])]
    if not finite:
        greedy = _greedy_start(problem)
        restored = greedy if np.isfinite(ocp_cost(problem, greedy)) else \
            _restore_feasibility(problem, greedy)
        if restored is None:
            raise OcpSolverError(
                f"no finite-cost control found at t={problem.t_k} (u_bar={u_bar})")
        starts.append(restored)
        f_starts = np.append(f_starts, ocp_cost(problem, restored))
        finite = [len(starts) - 1]

    best = None
    for i in finite:
        x, f, its = _descend(fun, proj, starts[i].ravel(), f_starts[i], u_bar, max_iter, rtol,
                             tr, start=i, box=(m == 1))
        if best is None or f < best[1]:
            best = (x, f, its, i)
    if trace is not None:
        trace.extend(tr.rows)
    x, f, its, idx = best
    U = x.reshape(shape)
    X = rollout(problem, U[None])[0]
    return OcpSolution(controls=U, cost=float(f), t_grid=problem.t_grid.copy(), predicted_x=X,
                       predicted_y=np.atleast_2d(problem.model.output(X)), iterations=its,
                       start_index=idx)


def shifted_warm_start(sol: OcpSolution) -> np.ndarray:
    """Previous controls shifted by one piece and padded with the last one."""
    U = sol.controls
    return np.vstack([U[1:], U[-1:]])


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "iteration", "cost", "step"])
        w.writerows(rows)


@dataclass(frozen=True)
class AdaptiveFunnel:
    """``phi = psi - |y_M - y_ref|`` on one sampling interval, linearly interpolated."""

    t: np.ndarray
    phi: np.ndarray
    y_M: np.ndarray

    def __call__(self, t):
        return np.interp(t, self.t, self.phi)

    def y_M_at(self, t):
        t = np.atleast_1d(t)
        return np.stack([np.interp(t, self.t, self.y_M[:, i]) for i in range(self.y_M.shape[1])],
                        axis=-1)


def adaptive_funnel(funnel: FunnelSpec, reference: ReferenceSignal, t_grid,
                    predicted_y) -> AdaptiveFunnel:
    t_grid = np.asarray(t_grid, dtype=float)
    yM = np.atleast_2d(np.asarray(predicted_y, dtype=float))
    if yM.shape[0] != t_grid.size:
        yM = yM.T
    phi = funnel_value(funnel, t_grid) - np.linalg.norm(yM - reference(t_grid), axis=-1)
    if np.any(phi <= 0):
        bad = int(np.argmax(phi <= 0))
        raise FunnelConsistencyError(f"adaptive funnel nonpositive at t={t_grid[bad]}")
    return AdaptiveFunnel(t_grid, phi, yM)
