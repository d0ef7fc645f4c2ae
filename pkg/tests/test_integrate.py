import math

import numpy as np
import pytest

from funnelmpc.integrate import (IntegrationError, PiecewiseConstant, VectorField, ZohSolutionOp,
                                 chi, integrate)

ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])


def lin(A, B=None):
    A = np.asarray(A, float)
    B = np.zeros((A.shape[0], 1)) if B is None else np.asarray(B, float)
    return VectorField(A.shape[0], lambda t, x, u: x @ A.T + np.atleast_1d(u) @ B.T)


def test_constant_field():
    traj = integrate(lambda t, x, u: np.zeros_like(x), [7.0], 0.0, 0.0, 1.0, 0.1)
    assert traj.final[0] == 7.0


def test_integrator_exact():
    traj = integrate(lambda t, x, u: np.atleast_1d(u) * np.ones_like(x), [2.0], 1.0, 0.0, 0.1, 0.01)
    assert traj.final[0] == pytest.approx(2.1, abs=1e-14)


def test_rotation_against_closed_form():
    traj = integrate(lin(ROT), [1.0, 0.0], 0.0, 0.0, math.pi, math.pi / 3142)
    exact = np.stack([np.cos(traj.t), -np.sin(traj.t)], axis=1)
    assert np.max(np.abs(traj.x - exact)) <= 1e-6
    np.testing.assert_allclose(traj.final, [-1.0, 0.0], atol=1e-6)


def test_first_order_lag_relative_error():
    f = lin([[-1.0]], [[1.0]])
    traj = integrate(f, [0.0], 1.0, 0.0, 2.0, 1e-3)
    exact = 1 - np.exp(-traj.t[1:])
    assert np.max(np.abs(traj.x[1:, 0] - exact) / exact) <= 1e-6


def test_step_halving_ratio():
    f = lambda t, x, u: np.array([x[1], -np.sin(x[0])])
    ref = integrate(f, [1.0, 0.0], 0.0, 0.0, 2.0, 1e-4).final
    e1 = np.linalg.norm(integrate(f, [1.0, 0.0], 0.0, 0.0, 2.0, 0.1).final - ref)
    e2 = np.linalg.norm(integrate(f, [1.0, 0.0], 0.0, 0.0, 2.0, 0.05).final - ref)
    assert 12 <= e1 / e2 <= 20


def test_step_must_divide():
    with pytest.raises(ValueError):
        integrate(lin(ROT), [1.0, 0.0], 0.0, 0.0, 1.0, 0.3)
    with pytest.raises(ValueError):
        integrate(lin(ROT), [1.0, 0.0], 0.0, 1.0, 1.0, 0.1)


def test_blowup_reports_time():
    f = lambda t, x, u: x * x
    with pytest.raises(IntegrationError) as exc:
        integrate(f, [1.0], 0.0, 0.0, 5.0, 0.01)
    assert 0.9 < exc.value.t <= 5.0


def test_piecewise_constant_control():
    u = PiecewiseConstant(0.0, 0.5, [[1.0], [-1.0]])
    traj = integrate(lambda t, x, u: np.atleast_1d(u) * np.ones_like(x), [0.0], u, 0.0, 1.0, 0.01)
    assert traj.final[0] == pytest.approx(0.0, abs=1e-12)
    assert traj.x[50, 0] == pytest.approx(0.5, abs=1e-12)


def test_chi_examples():
    integ = VectorField(1, lambda t, x, u: np.atleast_1d(u) * np.ones_like(x))
    assert chi(ZohSolutionOp(integ, 0.1, 4), [0.0], [2.0])[0] == pytest.approx(0.2, abs=1e-15)
    zero = VectorField(2, lambda t, x, u: np.zeros_like(x))
    np.testing.assert_array_equal(chi(ZohSolutionOp(zero, 0.1), [1.0, 2.0], [5.0]), [1.0, 2.0])
    lag = ZohSolutionOp(lin([[-1.0]], [[1.0]]), 1.0, 1000)
    assert chi(lag, [0.0], [1.0])[0] == pytest.approx(0.632120558828558, abs=1e-6)


def test_chi_composition_matches_integrate():
    f = lin([[-0.5, 1.0], [-1.0, -0.2]], [[0.0], [1.0]])
    op = ZohSolutionOp(f, 0.1, 10)
    z = np.array([1.0, -1.0])
    for _ in range(7):
        z = chi(op, z, [0.3])
    full = integrate(f, [1.0, -1.0], np.array([0.3]), 0.0, 0.7, 0.01).final
    assert np.max(np.abs(z - full)) <= 1e-12


def test_chi_linearity(rng):
    f = lin([[-0.5, 1.0], [-1.0, -0.2]], [[0.0], [1.0]])
    op = ZohSolutionOp(f, 0.2, 5)
    z1, z2 = rng.normal(size=2), rng.normal(size=2)
    u1, u2 = rng.normal(size=1), rng.normal(size=1)
    a, b = 0.7, -1.3
    lhs = chi(op, a * z1 + b * z2, a * u1 + b * u2)
    rhs = a * chi(op, z1, u1) + b * chi(op, z2, u2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_zoh_validation():
    with pytest.raises(ValueError):
        ZohSolutionOp(lin(ROT), 0.1, 0)
    assert ZohSolutionOp(lin(ROT), 0.1, 4).step == pytest.approx(0.025)
