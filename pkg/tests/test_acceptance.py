"""End-to-end acceptance criteria.

Each test records a one-line verdict; the lines are printed in the pytest
terminal summary (and immediately with ``-s``).
"""

import math
import time
import warnings

import numpy as np
import pytest

from funnelmpc.config import bundled, load
from funnelmpc.core import FunnelSpec, constant_reference
from funnelmpc.fmpc import OcpProblem, StageCostParams, ocp_cost, solve_ocp
from funnelmpc.integrate import VectorField, ZohSolutionOp, chi, integrate
from funnelmpc.learn.certify import (ClassBounds, admissible_d1_bound, m_ubar_certificate,
                                     sample_members, verify_internal_bound)
from funnelmpc.learn.graybox import GrayboxParams, graybox_objective, learn_graybox
from funnelmpc.learn.linear import LearnScheme
from funnelmpc.learn.surrogate import LinearSurrogate
from funnelmpc.runner import OK, run

from test_graybox import TAU as MOC_TAU, TRUE as MOC_TRUE, plant_log

RESULTS = {}

REACTOR_BOUNDS = ClassBounds(1.3, 1.4, 1.0, 1 / 400, 0.91, 408.6, 735.0, 3.0)
REACTOR_FUNNEL = FunnelSpec(100.0, 2.0, 1.5)
REACTOR_REF = constant_reference(337.1)


def record(n, ok, detail, advisory=False):
    tag = "PASS" if ok else ("WARN" if advisory else "FAIL")
    line = f"criterion {n:2d} {tag}: {detail}"
    RESULTS[n] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def reactor_run():
    return run(load(bundled("reactor")))


@pytest.fixture(scope="module")
def moc_run():
    return run(load(bundled("mass_on_car")))


def _funnel_check(rep):
    e = np.linalg.norm(rep.y - rep.y_ref, axis=1)
    return int(np.sum(~(e < rep.psi))), float(np.max(e / rep.psi))


def test_c01_reactor_benchmark(reactor_run):
    rep = reactor_run
    viol, ratio = _funnel_check(rep)
    umax = float(np.max(np.linalg.norm(rep.u_fmpc, axis=1)))
    ok = (rep.status == OK and rep.exit_code == 0 and viol == 0 and umax <= 735.0
          and rep.t[-1] >= 3.0 - 1e-9 and rep.runtime < 300)
    record(1, ok, f"reactor status={rep.status} violations={viol} max|e|/psi={ratio:.5f} "
                  f"max|u_FMPC|={umax:.3f} runtime={rep.runtime:.1f}s")
    assert ok


def test_c02_mass_on_car_benchmark(moc_run):
    rep = moc_run
    viol, ratio = _funnel_check(rep)
    umax = float(np.max(np.linalg.norm(rep.u_fmpc, axis=1)))
    marks = rep.t[rep.learn_flag == 1]
    marks_ok = np.allclose(marks, 0.6 * np.arange(1, 7), atol=1e-9)
    ok = (rep.status == OK and viol == 0 and umax <= 25.0 and marks_ok
          and rep.t[-1] >= 4.0 - 1e-9 and rep.runtime < 600)
    record(2, ok, f"mass-on-car status={rep.status} violations={viol} max|e|/psi={ratio:.5f} "
                  f"max|u_FMPC|={umax:.3f} t_final={rep.t[-1]:.4g} "
                  f"learning at {np.round(marks, 3).tolist()} "
                  f"runtime={rep.runtime:.1f}s")
    assert ok


def test_c03_reactor_d1_bound():
    d1 = admissible_d1_bound(REACTOR_BOUNDS, REACTOR_FUNNEL, REACTOR_REF)
    ok = abs(d1 - 2.546) <= 1e-3
    record(3, ok, f"admissible |D1| = {d1:.9f} (target 2.546)")
    assert ok


def test_c04_reactor_input_certificate():
    m = LinearSurrogate([[1.3]], [[1.4, 0.0]], [[1.0]], [2.546], -5 * np.eye(2), np.zeros((2, 1)),
                        np.zeros(2), np.zeros(2))
    cert = m_ubar_certificate(m, REACTOR_BOUNDS, REACTOR_FUNNEL, REACTOR_REF)
    ok = abs(cert.required_u - 735.0) <= 1e-6 and cert.passes
    record(4, ok, f"required_u = {cert.required_u:.12g} vs u_bar = 735")
    assert ok


def test_c05_class_implies_certified_models():
    t0 = time.perf_counter()
    members = sample_members(REACTOR_BOUNDS, REACTOR_FUNNEL, REACTOR_REF, 1, 2, 200, seed=2024)
    cert_fail = viol = 0
    worst = 0.0
    for i, m in enumerate(members):
        if not m_ubar_certificate(m, REACTOR_BOUNDS, REACTOR_FUNNEL, REACTOR_REF).passes:
            cert_fail += 1
        rep = verify_internal_bound(m, REACTOR_BOUNDS, REACTOR_FUNNEL, REACTOR_REF, trials=100,
                                    horizon=5.0, seed=i)
        viol += len(rep.violations)
        worst = max(worst, rep.max_norm)
    dt = time.perf_counter() - t0
    ok = cert_fail == 0 and viol == 0 and dt < 120
    record(5, ok, f"200 sampled members: certificate failures={cert_fail}, internal-bound "
                  f"violations={viol} (max |eta|={worst:.4f} <= 0.91), {dt:.1f}s")
    assert ok


def test_c06_recursive_feasibility(reactor_run, moc_run):
    parts, ok = [], True
    for name, rep in (("reactor", reactor_run), ("mass-on-car", moc_run)):
        finite = bool(np.all(np.isfinite(rep.step_costs)))
        n_ok = len(rep.step_costs) == int(round(rep.t[-1] / (0.1 if name == "reactor" else 0.06)))
        ok &= finite and n_ok and all(rep.feasible) and rep.status != "feasibility_lost"
        parts.append(f"{name}: {len(rep.step_costs)} finite OCP costs")
    record(6, ok, "; ".join(parts))
    assert ok


def test_c07_learning_efficacy(reactor_run):
    rep = reactor_run
    a = np.linalg.norm(rep.u_fc, axis=1)
    early = float(a[rep.t < 0.5].mean())
    late = float(a[rep.t >= 0.75 * rep.t[-1]].mean())
    ratio = late / early
    ok = ratio <= 0.25
    record(7, ok, f"mean |u_FC| late/early = {late:.4g}/{early:.4g} = {ratio:.4f} "
                  f"(advisory, threshold 0.25)", advisory=True)
    if not ok:
        warnings.warn(f"learning efficacy ratio {ratio:.3f} above 0.25 (advisory)")


def test_c08_integrator_oracle():
    rot = VectorField(2, lambda t, x, u: x @ np.array([[0.0, -1.0], [1.0, 0.0]]))
    tr = integrate(rot, [1.0, 0.0], 0.0, 0.0, 2.0, 1e-3)
    exact = np.stack([np.cos(tr.t), -np.sin(tr.t)], axis=1)
    rel_rot = float(np.max(np.linalg.norm(tr.x - exact, axis=1) / np.linalg.norm(exact, axis=1)))
    lag = VectorField(1, lambda t, x, u: -x + u)
    tl = integrate(lag, [0.0], np.array([1.0]), 0.0, 3.0, 1e-3)
    ex = 1 - np.exp(-tl.t[1:])
    rel_lin = float(np.max(np.abs(tl.x[1:, 0] - ex) / ex))
    op = ZohSolutionOp(lag, 0.1, 100)
    z = np.array([0.0])
    for k in range(10):
        z = chi(op, z, np.array([1.0]), 0.1 * k)
    comp = float(abs(z[0] - integrate(lag, [0.0], np.array([1.0]), 0.0, 1.0, 1e-3).final[0]))
    ok = rel_rot <= 1e-6 and rel_lin <= 1e-6 and comp <= 1e-12
    record(8, ok, f"RK4 max rel error rotation={rel_rot:.2e} first-order={rel_lin:.2e}; "
                  f"chi composition gap={comp:.1e}")
    assert ok


def test_c09_ocp_oracle():
    grid_best = 0.00993522102854704  # exhaustive {-10,-5,0,5,10}^10, trapezoid on 0.01 grid
    prob = OcpProblem(LinearSurrogate.zero(1), 0.0, [0.5], 1.0, 0.1, 10.0,
                      StageCostParams(0.0, FunnelSpec(0.5, 0.0, 0.5), constant_reference(0.0)),
                      0.01)
    U = np.zeros((10, 1))
    U[0] = -5.0
    assert ocp_cost(prob, U) == pytest.approx(grid_best, rel=1e-12)
    cost = solve_ocp(prob).cost
    never_worse = cost <= grid_best
    within = cost >= 0.95 * grid_best
    ok = never_worse and within
    record(9, ok, f"OCP cost {cost:.6g} vs grid best {grid_best:.6g}: never worse={never_worse}, "
                  f"within 5%={within} (gap {100 * (1 - cost / grid_best):.1f}%)")
    assert never_worse
    assert within, "solver beats the coarse grid by more than 5%"


def test_c10_graybox_self_consistency():
    log, _ = plant_log()
    at_truth = learn_graybox(log, LearnScheme("graybox"), MOC_TRUE, model_step=MOC_TAU)
    guess = GrayboxParams.initial_guess()
    J0 = graybox_objective(log, guess, model_step=MOC_TAU)
    from_guess = learn_graybox(log, LearnScheme("graybox"), guess, model_step=MOC_TAU)
    ok = at_truth.J <= 1e-10 and from_guess.J < J0
    record(10, ok, f"J(init at truth)={at_truth.J:.2e}; J(init at guess) {J0:.4g} -> "
                   f"{from_guess.J:.3g}")
    assert ok
