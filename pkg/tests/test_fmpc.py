import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funnelmpc.core import FunnelSpec, constant_reference
from funnelmpc.fmpc import (FunnelConsistencyError, InfeasibleStartError, OcpProblem,
                            OcpSolverError, StageCostParams, adaptive_funnel, ocp_cost,
                            project_controls, rollout, shifted_warm_start, solve_ocp, stage_cost,
                            write_trace)
from funnelmpc.learn.surrogate import LinearSurrogate

ZERO = constant_reference(0.0)
PSI1 = FunnelSpec(0.5, 0.0, 0.5)  # constant radius one
GRID_BEST = 0.00993522102854704  # exhaustive search over {-10,-5,0,5,10}^10, trapezoid rule


def integrator_problem(y0=0.5, lam=0.0, u_bar=10.0, funnel=PSI1, model=None, t_k=0.0):
    model = LinearSurrogate.zero(1) if model is None else model
    return OcpProblem(model, t_k, np.atleast_1d(y0), 1.0, 0.1, u_bar,
                      StageCostParams(lam, funnel, ZERO), 0.01)


def test_stage_cost_examples():
    p = StageCostParams(0.01, FunnelSpec(1.0, 0.0, 1.0), ZERO)
    assert stage_cost(0.0, [0.0], [0.0], p) == 0.0
    assert stage_cost(0.0, [2.0], [0.0], p) == np.inf
    assert stage_cost(0.0, [1.0], [3.0], p) == pytest.approx(0.423333333333333, abs=1e-12)


def test_stage_cost_outside_is_evaluated_as_written():
    p = StageCostParams(0.0, PSI1, ZERO)
    assert stage_cost(0.0, [2.0], [0.0], p) == pytest.approx(4.0 / (1.0 - 4.0))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 0.999), b=st.floats(0, 0.999), u=st.floats(-3, 3))
def test_stage_cost_monotone_in_error(a, b, u):
    p = StageCostParams(0.1, PSI1, ZERO)
    lo, hi = sorted([a, b])
    assert stage_cost(0.0, [lo], [u], p) <= stage_cost(0.0, [hi], [u], p)


def test_stage_cost_blows_up_near_boundary():
    p = StageCostParams(0.0, PSI1, ZERO)
    assert stage_cost(0.0, [1 - 1e-9], [0.0], p) > 1e8


def test_solve_on_reference_is_zero():
    sol = solve_ocp(integrator_problem(y0=0.0))
    assert sol.cost == 0.0
    np.testing.assert_array_equal(sol.controls, 0.0)


def test_infeasible_start():
    with pytest.raises(InfeasibleStartError):
        solve_ocp(integrator_problem(y0=1.0))


def test_no_input_authority_fails():
    drift = LinearSurrogate(np.zeros((1, 1)), np.zeros((1, 0)), [[1.0]], [50.0], np.zeros((0, 0)),
                            np.zeros((0, 1)), np.zeros(0), np.zeros(0))
    with pytest.raises(OcpSolverError):
        solve_ocp(integrator_problem(y0=0.5, u_bar=1.0, model=drift))


def test_solution_never_worse_than_grid():
    sol = solve_ocp(integrator_problem())
    assert sol.cost <= GRID_BEST


def test_grid_value_reproduced_by_cost():
    # the brute-force optimum is attained by one grid sequence
    U = np.zeros((10, 1))
    U[0] = -5.0
    assert ocp_cost(integrator_problem(), U) == pytest.approx(GRID_BEST, rel=1e-12)


def test_small_grid_search_dominated(rng):
    # exhaustive search over a 3-piece problem
    prob = OcpProblem(LinearSurrogate.zero(1), 0.0, [0.6], 0.3, 0.1, 4.0,
                      StageCostParams(0.05, PSI1, ZERO), 0.02)
    levels = np.linspace(-4, 4, 9)
    pts = np.array(list(itertools.product(levels, repeat=3)))[:, :, None]
    best = min(ocp_cost(prob, U) for U in pts)
    assert solve_ocp(prob).cost <= best + 1e-12


def test_controls_within_bound_and_cost_consistent():
    prob = integrator_problem(y0=0.8, lam=1e-3, u_bar=3.0)
    sol = solve_ocp(prob)
    assert np.max(np.linalg.norm(sol.controls, axis=1)) <= 3.0
    assert np.all(np.abs(sol.predicted_y[:, 0]) < 1.0)
    # trapezoid quadrature along the returned trajectory
    t, y = sol.t_grid, sol.predicted_y
    # each piece uses its own control at both ends of its substeps
    total = 0.0
    h = prob.delta / prob.substeps
    for i in range(prob.n_pieces):
        for j in range(prob.substeps):
            k = i * prob.substeps + j
            a = stage_cost(t[k], y[k], sol.controls[i], prob.cost)
            b = stage_cost(t[k + 1], y[k + 1], sol.controls[i], prob.cost)
            total += 0.5 * h * (a + b)
    assert sol.cost == pytest.approx(total, rel=1e-9, abs=1e-12)


def test_warm_start_dominance():
    prob0 = integrator_problem(y0=0.7, lam=1e-3)
    sol0 = solve_ocp(prob0)
    warm = shifted_warm_start(sol0)
    prob1 = integrator_problem(y0=float(sol0.predicted_y[prob0.substeps, 0]), lam=1e-3, t_k=0.1)
    sol1 = solve_ocp(prob1, warm_start=warm)
    assert sol1.cost <= ocp_cost(prob1, warm)
    assert np.allclose(warm[:-1], sol0.controls[1:]) and np.allclose(warm[-1], sol0.controls[-1])


def test_cost_monotone_in_lambda():
    costs = [solve_ocp(integrator_problem(y0=0.6, lam=lam)).cost for lam in (0.0, 1e-3, 1e-2)]
    assert costs[0] <= costs[1] <= costs[2]


def test_deterministic():
    a = solve_ocp(integrator_problem(lam=1e-3))
    b = solve_ocp(integrator_problem(lam=1e-3))
    np.testing.assert_array_equal(a.controls, b.controls)


def test_projection_per_piece():
    U = np.array([[[3.0, 4.0], [0.3, 0.4]]])
    P = project_controls(U, 1.0)
    np.testing.assert_allclose(np.linalg.norm(P, axis=-1), [[1.0, 0.5]])


def test_rollout_integrator_exact():
    prob = integrator_problem()
    X = rollout(prob, np.full((1, 10, 1), 0.2))
    np.testing.assert_allclose(X[0, -1], [0.7], atol=1e-14)


def test_trace_written(tmp_path):
    rows = []
    solve_ocp(integrator_problem(lam=1e-3), trace=rows)
    assert rows
    write_trace(tmp_path / "trace.csv", rows)
    head = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert head == "start,iteration,cost,step"


def test_adaptive_funnel_examples(reactor_funnel, reactor_ref):
    t = np.linspace(0, 0.1, 11)
    af = adaptive_funnel(PSI1, ZERO, t, np.zeros((11, 1)))
    np.testing.assert_allclose(af.phi, 1.0)
    af = adaptive_funnel(FunnelSpec(1.0, 0.0, 1.0), ZERO, t, np.full((11, 1), 0.5))
    np.testing.assert_allclose(af(0.05), 1.5)
    af = adaptive_funnel(reactor_funnel, reactor_ref, [0.0, 0.01], [[270.0], [271.0]])
    assert af.phi[0] == pytest.approx(34.4, abs=1e-12)


def test_adaptive_funnel_linear_interpolation():
    af = adaptive_funnel(PSI1, ZERO, [0.0, 1.0], [[0.0], [0.5]])
    assert af(0.5) == pytest.approx(0.75)


def test_adaptive_funnel_consistency_error():
    with pytest.raises(FunnelConsistencyError):
        adaptive_funnel(PSI1, ZERO, [0.0, 1.0], [[0.0], [1.0]])
