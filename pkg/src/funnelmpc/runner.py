"""Closed-loop simulation: model reset, OCP, funnel-controlled rollout, learning."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from . import __version__
from .config import Setup
from .core import DataLog, DomainError, SignalSample, funnel_value
from .fc import FcState, FunnelViolation, fc_rd1, fc_rd2
from .fmpc import (FunnelConsistencyError, InfeasibleStartError, OcpProblem, OcpSolverError,
                   StageCostParams, adaptive_funnel, shifted_warm_start, solve_ocp)
from .integrate import IntegrationError, rk4_step
from .learn.certify import m_ubar_certificate, verify_internal_bound, check_K_membership
from .learn.checkpoint import write_model
from .learn.graybox import MassOnCarModel, fitted_state, learn_graybox
from .learn.linear import learn_linear
from .learn.surrogate import LinearSurrogate

log = logging.getLogger(__name__)

OK, FUNNEL_VIOLATION, FEASIBILITY_LOST = "ok", "funnel_violation", "feasibility_lost"
EXIT_CODES = {OK: 0, FUNNEL_VIOLATION: 2, FEASIBILITY_LOST: 3}


class FeasibilityLost(RuntimeError):
    pass


class ReportFormatError(ValueError):
    """Report file is empty, truncated or malformed."""


class NondeterminismError(RuntimeError):
    """Replaying the logged inputs does not reproduce the logged outputs."""


def csv_columns(m: int) -> List[str]:
    cols = ["t"]
    for name in ("y", "y_M", "y_ref"):
        cols += [f"{name}[{i}]" for i in range(m)]
    cols += ["psi", "phi"]
    for name in ("u_fmpc", "u_fc", "u"):
        cols += [f"{name}[{i}]" for i in range(m)]
    return cols + ["learn_flag"]


@dataclass
class RunState:
    k: int
    t_k: float
    model: object
    solution: object
    log: DataLog
    x_plant: np.ndarray
    max_ratio: float = 0.0
    max_dev_ratio: float = 0.0
    fc_activity: float = 0.0


@dataclass
class RunReport:
    m: int
    t: np.ndarray
    y: np.ndarray
    y_M: np.ndarray
    y_ref: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    u_fmpc: np.ndarray
    u_fc: np.ndarray
    u: np.ndarray
    learn_flag: np.ndarray
    status: str = OK
    message: str = ""
    failure: Optional[dict] = None
    step_costs: List[float] = field(default_factory=list)
    feasible: List[bool] = field(default_factory=list)
    learn_events: List[dict] = field(default_factory=list)
    models: List[tuple] = field(default_factory=list)
    max_ratio: float = 0.0
    max_dev_ratio: float = 0.0
    runtime: float = 0.0
    digest: str = ""
    seed: int = 0
    report_every: int = 1

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    @property
    def maxima(self) -> Dict[str, float]:
        def mx(a):
            return float(np.max(np.abs(a))) if a.size else 0.0
        return dict(y=mx(self.y), u_fmpc=mx(self.u_fmpc), u_fc=mx(self.u_fc), u=mx(self.u))

    def columns(self) -> Dict[str, np.ndarray]:
        out = {"t": self.t}
        for name in ("y", "y_M", "y_ref"):
            for i in range(self.m):
                out[f"{name}[{i}]"] = getattr(self, name)[:, i]
        out["psi"], out["phi"] = self.psi, self.phi
        for name in ("u_fmpc", "u_fc", "u"):
            for i in range(self.m):
                out[f"{name}[{i}]"] = getattr(self, name)[:, i]
        out["learn_flag"] = self.learn_flag
        return out


class _Recorder:
    def __init__(self, m):
        self.m = m
        self.rows = []

    def add(self, t, y, yM, yref, psi, phi, uf, uc, u, flag):
        self.rows.append((t, y, yM, yref, psi, phi, uf, uc, u, flag))

    def report(self, **kw) -> RunReport:
        m = self.m
        if self.rows:
            cols = list(zip(*self.rows))
            arr = lambda i: np.array(cols[i], dtype=float).reshape(len(self.rows), -1)
            return RunReport(m, np.array(cols[0]), arr(1), arr(2), arr(3), np.array(cols[4]),
                             np.array(cols[5]), arr(6), arr(7), arr(8),
                             np.array(cols[9], dtype=int), **kw)
        z = np.zeros((0, m))
        return RunReport(m, np.zeros(0), z, z, z, np.zeros(0), np.zeros(0), z, z, z,
                         np.zeros(0, dtype=int), **kw)


def _plant_field(plant):
    if plant.disturbance is None:
        return plant.rhs
    d = plant.disturbance
    return lambda t, x, u: plant.rhs(t, x, u) + np.asarray(d(t), dtype=float)


def certify_initial_model(setup: Setup, seed: int = 0) -> List[str]:
    """Reasons the initial model is not certified (empty when it is)."""
    model, bounds = setup.model, setup.bounds
    if not isinstance(model, LinearSurrogate):
        log.info("initial gray-box model is not covered by the linear certificate")
        return []
    if bounds is None:
        log.warning("no class bounds configured; initial model left uncertified")
        return []
    problems = []
    cert = m_ubar_certificate(model, bounds, setup.funnel, setup.reference)
    if not cert.passes:
        problems.append(f"input certificate needs {cert.required_u:.6g} > u_bar={bounds.u_bar:.6g}")
    ib = verify_internal_bound(model, bounds, setup.funnel, setup.reference, trials=100,
                               horizon=5.0, seed=seed)
    if not ib.ok:
        problems.append(f"internal state exceeded eta_bar (max {ib.max_norm:.6g})")
    return problems


def run(setup: Setup, checkpoint_dir: Optional[Path] = None, ocp_max_iter: int = 200) -> RunReport:
    """Simulate the closed loop described by ``setup`` on ``[0, t_end]``."""
    cfg = setup.run
    plant, funnel, ref = setup.plant, setup.funnel, setup.reference
    m = plant.m
    t_start = time.perf_counter()
    rec = _Recorder(m)
    seeds = np.random.SeedSequence(cfg.seed)
    learn_seeds = iter(seeds.spawn(10_000))
    meta = dict(digest=setup.digest, seed=cfg.seed, report_every=cfg.report_every)
    costs, feasible, events, models = [], [], [], []

    def finish(status, message="", failure=None):
        rep = rec.report(status=status, message=message, failure=failure, step_costs=costs,
                         feasible=feasible, learn_events=events, models=models,
                         max_ratio=st.max_ratio, max_dev_ratio=st.max_dev_ratio,
                         runtime=time.perf_counter() - t_start, **meta)
        log.info("run finished: %s %s (%.1fs)", status, message, rep.runtime)
        return rep

    st = RunState(0, 0.0, setup.model, None, DataLog(cfg.tau), plant.initial_state.copy())
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(model, k):
        if checkpoint_dir is None:
            return
        obj = model.params if isinstance(model, MassOnCarModel) else model
        write_model(checkpoint_dir / f"model_{k:04d}.txt", obj, setup.bounds, t=cfg.t_k(k))

    if setup.certify_initial:
        problems = certify_initial_model(setup, seed=cfg.seed)
        if problems:
            return finish(FEASIBILITY_LOST, "initial model not certified: " + "; ".join(problems))
    models.append((0.0, st.model))
    checkpoint(st.model, 0)

    f_plant = _plant_field(plant)
    n_sub = int(round(cfg.delta / cfg.plant_step))
    h = cfg.delta / n_sub
    tau_steps = int(round(cfg.tau / h))
    stride = cfg.report_every
    cost = StageCostParams(cfg.lambda_u, funnel, ref)
    n_steps = cfg.n_steps
    warm = None
    x_pred = None
    ydot_plant = (lambda x: np.atleast_1d(plant.output_rate(x))) if plant.output_rate else None
    rd2 = setup.fc_kind == "rd2"

    for k in range(n_steps):
        st.k, st.t_k = k, cfg.t_k(k)
        t_k = st.t_k
        y_k = np.atleast_1d(plant.output(st.x_plant)).astype(float)
        st.log.append(SignalSample(t_k, y_k, y_k))
        flag = 0

        # (d) learning on the data up to t_k, before the model is used again
        if k > 0 and k % cfg.learn_every == 0 and setup.scheme.kind != "none":
            ev = _learn(setup, st, next(learn_seeds))
            events.append(ev)
            if ev["adopted"]:
                st.model = ev["model"]
                x_pred = ev.get("x_pred")
                warm = None
                flag = 1
                models.append((t_k, st.model))
                checkpoint(st.model, k)

        # (a) reset the model output to the measurement
        model = st.model
        if setup.eta_policy == "reset":
            x_init = model.reinit(y_k)
        else:
            x_init = model.reinit(y_k, x_pred, ydot_plant(st.x_plant) if (rd2 and ydot_plant) else None)

        # (b) optimal control on the horizon
        try:
            problem = OcpProblem(model, t_k, x_init, cfg.horizon, cfg.delta, cfg.u_bar, cost,
                                 cfg.model_step)
            sol = solve_ocp(problem, warm_start=warm, max_iter=ocp_max_iter)
        except (InfeasibleStartError, OcpSolverError) as exc:
            feasible.append(False)
            st.log.complete_last(np.zeros(m), np.zeros(m))
            return finish(FEASIBILITY_LOST, str(exc), dict(t=t_k, k=k))
        feasible.append(bool(np.isfinite(sol.cost)))
        costs.append(float(sol.cost))
        st.solution = sol
        warm = shifted_warm_start(sol)
        s = problem.substeps
        tg = sol.t_grid[: s + 1]
        Xg = sol.predicted_x[: s + 1]
        yg = np.array(sol.predicted_y[: s + 1], dtype=float)
        yg[0] = y_k
        u_piece = sol.controls[0]
        try:
            adaptive_funnel(funnel, ref, tg, yg)
        except FunnelConsistencyError as exc:
            return finish(FEASIBILITY_LOST, str(exc), dict(t=t_k, k=k))
        x_pred = sol.predicted_x[s]

        # (c) plant rollout under u_FMPC + u_FC at the fine step
        last = k == n_steps - 1
        t_end_k = cfg.t_k(k + 1)
        nj = n_sub + 1 if last else n_sub
        tt = t_k + h * np.arange(n_sub + 1)
        tt[-1] = t_end_k
        ydg = np.atleast_2d(model.output_rate(Xg, np.broadcast_to(u_piece, (s + 1, m))))
        spline = CubicHermiteSpline(tg, yg, ydg, axis=0)
        yM_t = spline(tt)
        ydM_t = spline(tt, 1)
        yM_t[0] = y_k
        yref_t = ref(tt)
        psi_t = funnel_value(funnel, tt)
        phi_t = psi_t - np.linalg.norm(yM_t - yref_t, axis=-1)
        try:
            for j in range(nj):
                t = tt[j]
                x = st.x_plant
                y = np.atleast_1d(plant.output(x))
                e = y - yref_t[j]
                ratio = float(np.sqrt(e @ e)) / psi_t[j]
                st.max_ratio = max(st.max_ratio, ratio)
                if not ratio < 1.0:
                    raise FunnelViolation(f"tracking error left the funnel at t={t:.6g} "
                                          f"(|e|/psi={ratio:.6g})", t=t, state={"y": y})
                phi = phi_t[j]
                if not phi > 0:
                    raise FunnelViolation(f"adaptive funnel collapsed at t={t:.6g}", t=t)
                dev = y - yM_t[j]
                st.max_dev_ratio = max(st.max_dev_ratio, float(np.sqrt(dev @ dev)) / phi)
                if rd2:
                    u_fc = fc_rd2(dev, ydot_plant(x) - ydM_t[j], phi, t)
                else:
                    u_fc = fc_rd1(t, y, FcState(yM_t[j], phi, setup.activation))
                u = u_piece + u_fc
                if j == 0:
                    st.log.complete_last(u_piece.copy(), u_fc.copy())
                elif j % tau_steps == 0 and j < n_sub:
                    st.log.append(SignalSample(t, y, yM_t[j], u_piece.copy(), u_fc.copy()))
                if (k * n_sub + j) % stride == 0:
                    rec.add(t, y, y_k if j == 0 else yM_t[j], yref_t[j], psi_t[j], phi, u_piece,
                            u_fc, u, flag if j == 0 else 0)
                if j < n_sub:
                    xn = rk4_step(f_plant, t, x, u, h)
                    if not np.all(np.isfinite(xn)):
                        raise IntegrationError(t + h)
                    st.x_plant = xn
                st.fc_activity += float(np.sqrt(u_fc @ u_fc)) * h
        except FunnelViolation as exc:
            return finish(FUNNEL_VIOLATION, str(exc), dict(t=exc.t, k=k, **exc.state))
        except (IntegrationError, DomainError, FloatingPointError) as exc:
            return finish(FUNNEL_VIOLATION, f"plant integration failed: {exc}", dict(t=t, k=k))

    return finish(OK)


def _learn(setup: Setup, st: RunState, seed_seq) -> dict:
    """One learning step on the log; returns an event record."""
    t_k = st.t_k
    seed = int(seed_seq.generate_state(1)[0])
    scheme = dc_replace(setup.scheme, seed=seed)
    model = st.model
    ev = dict(t=t_k, k=st.k, adopted=False)
    if isinstance(model, MassOnCarModel):
        res = learn_graybox(st.log, scheme, model.params, model_step=setup.run.model_step)
        ev.update(J=res.J, J_prev=res.J_init, message=res.message, fallback=res.fallback)
        if not res.fallback and res.params != model.params:
            new = MassOnCarModel(res.params)
            ev.update(adopted=True, model=new,
                      x_pred=fitted_state(st.log, res.params, setup.run.model_step),
                      certified=False)
        return ev
    if setup.bounds is None:
        ev.update(message="no class bounds; learning skipped")
        return ev
    res = learn_linear(st.log, scheme, setup.bounds, setup.funnel, setup.reference, model,
                       model_step=setup.run.model_step)
    ev.update(J=res.J, J_prev=res.J_prev, message=res.message, fallback=res.fallback)
    rep = check_K_membership(res.model, setup.bounds, setup.funnel, setup.reference)
    if res.model is not model and rep.member and not res.fallback:
        ev.update(adopted=True, model=res.model, certified=True)
    elif res.model is not model:
        log.warning("learned model rejected at t=%.4g: %s", t_k, ", ".join(rep.failed()))
    return ev


# --- report files -------------------------------------------------------------


def write_report_csv(report: RunReport, path) -> Path:
    path = Path(path)
    cols = report.columns()
    names = list(cols)
    n = len(report.t)
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for i in range(n):
            vals = []
            for name in names:
                v = cols[name][i]
                vals.append(str(int(v)) if name == "learn_flag" else f"{float(v):.17g}")
            fh.write(",".join(vals) + "\n")
    return path


def read_report_csv(path) -> Dict[str, np.ndarray]:
    """Columns of a report file; raises ``ReportFormatError`` on bad input."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportFormatError(f"cannot read {path}: {exc}") from None
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ReportFormatError("empty report")
    header = lines[0].strip().split(",")
    m = sum(1 for h in header if h.startswith("y["))
    if m == 0 or header != csv_columns(m):
        raise ReportFormatError("unexpected report header")
    rows = [ln for ln in lines[1:] if ln.strip()]
    if not rows:
        raise ReportFormatError("report has no data rows")
    data = np.empty((len(rows), len(header)))
    for i, ln in enumerate(rows):
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ReportFormatError(f"row {i + 1}: expected {len(header)} fields, got {len(parts)}")
        try:
            data[i] = [float(p) for p in parts]
        except ValueError:
            raise ReportFormatError(f"row {i + 1}: non-numeric field") from None
    if not np.all(np.isfinite(data)):
        raise ReportFormatError("non-finite values in report")
    if np.any(np.diff(data[:, 0]) <= 0):
        raise ReportFormatError("time column is not increasing")
    out = {name: data[:, i] for i, name in enumerate(header)}
    out["_m"] = m
    return out


def report_from_columns(cols: Dict[str, np.ndarray]) -> RunReport:
    m = int(cols["_m"])
    stack = lambda name: np.stack([cols[f"{name}[{i}]"] for i in range(m)], axis=1)
    return RunReport(m, cols["t"], stack("y"), stack("y_M"), stack("y_ref"), cols["psi"],
                     cols["phi"], stack("u_fmpc"), stack("u_fc"), stack("u"),
                     cols["learn_flag"].astype(int))


def write_meta(path, setup: Setup, report: RunReport) -> Path:
    path = Path(path)
    lines = [
        f"config_sha256 {setup.digest}",
        f"seed {setup.run.seed}",
        f"version {version_string()}",
        f"status {report.status}",
        f"runtime_s {report.runtime:.3f}",
        f"max_abs_e_over_psi {report.max_ratio:.17g}",
        f"max_abs_dev_over_phi {report.max_dev_ratio:.17g}",
    ]
    for k, v in report.maxima.items():
        lines.append(f"max_abs_{k} {v:.17g}")
    lines.append("learning_times " + " ".join(f"{e['t']:.6g}" for e in report.learn_events
                                              if e.get("adopted")))
    if report.message:
        lines.append(f"message {report.message}")
    path.write_text("\n".join(lines) + "\n")
    return path


def version_string() -> str:
    """Package version with the source revision when available."""
    import subprocess

    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def replay(cols, setup: Setup, tol: float = 1e-9) -> float:
    """Re-integrate the plant under the logged inputs; returns the max output error.

    Needs a report written at every plant step (``report_every = 1``).
    """
    if isinstance(cols, RunReport):
        rep = cols
    else:
        rep = report_from_columns(cols)
    cfg = setup.run
    n_sub = int(round(cfg.delta / cfg.plant_step))
    h = cfg.delta / n_sub
    n = len(rep.t)
    if n < 2:
        raise ReportFormatError("report too short to replay")
    dt = np.diff(rep.t)
    if np.max(np.abs(dt - h)) > 1e-9 * max(1.0, h) * 1e3:
        raise ReportFormatError("report rows are not on the plant grid; replay needs "
                                "report_every = 1 and the matching config")
    expected = cfg.n_steps * n_sub + 1
    if n != expected:
        raise ReportFormatError(f"truncated report: {n} rows, expected {expected}")
    plant = setup.plant
    f = _plant_field(plant)
    x = plant.initial_state.copy()
    worst = 0.0
    for i in range(n):
        y = np.atleast_1d(plant.output(x))
        err = float(np.max(np.abs(y - rep.y[i])))
        worst = max(worst, err)
        if err > tol * max(1.0, float(np.max(np.abs(rep.y[i])))):
            raise NondeterminismError(
                f"replay mismatch at t={rep.t[i]:.9g}: |dy|={err:.3g}")
        if i + 1 < n:
            k, j = divmod(i, n_sub)
            x = rk4_step(f, cfg.t_k(k) + h * j, x, rep.u[i], h)
    return worst
