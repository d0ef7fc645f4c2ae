import math

import numpy as np
import pytest

from funnelmpc.core import DataLog, SignalSample
from funnelmpc.integrate import VectorField, ZohSolutionOp, chi
from funnelmpc.learn.checkpoint import CheckpointError, dumps, loads, read_model, write_model
from funnelmpc.learn.certify import ClassBounds
from funnelmpc.learn.graybox import (BoxError, GrayboxParams, MassOnCarModel, check_in_box,
                                     fitted_state, graybox_objective, learn_graybox)
from funnelmpc.learn.linear import LearnScheme
from funnelmpc.learn.surrogate import LinearSurrogate
from funnelmpc.plants import MassOnCarParams, mass_on_car_plant

TAU = 0.006
TRUE = GrayboxParams(math.pi / 4, 4.0, 1.0, 2.0, 1.0, (0.0, 0.0, 0.0, 0.0))


def plant_log(n=120, seed=0):
    plant = mass_on_car_plant(MassOnCarParams())
    op = ZohSolutionOp(VectorField(4, plant.rhs), TAU, 1)
    rng = np.random.default_rng(seed)
    x = plant.initial_state.copy()
    log = DataLog(TAU)
    for i in range(n):
        u = np.array([5 * np.sin(3 * i * TAU) + rng.normal()])
        y = plant.output(x)
        log.append(SignalSample(i * TAU, y, y, u, np.zeros(1)))
        x = chi(op, x, u, i * TAU)
    log.append(SignalSample(n * TAU, plant.output(x), plant.output(x)))
    return log, x


@pytest.fixture(scope="module")
def moc_data():
    return plant_log()


def test_fit_from_truth(moc_data):
    log, _ = moc_data
    res = learn_graybox(log, LearnScheme("graybox"), TRUE, model_step=TAU)
    assert res.J <= 1e-10


def test_fit_from_initial_guess_improves(moc_data):
    log, _ = moc_data
    guess = GrayboxParams.initial_guess()
    J0 = graybox_objective(log, guess, model_step=TAU)
    res = learn_graybox(log, LearnScheme("graybox"), guess, model_step=TAU, max_nfev=40)
    assert res.J_init == pytest.approx(J0, rel=1e-12)
    assert res.J < J0
    check_in_box(res.params)


def test_out_of_box_initialisation(moc_data):
    log, _ = moc_data
    with pytest.raises(BoxError, match="clamping"):
        learn_graybox(log, LearnScheme("graybox"), GrayboxParams(1.0, 10.0, 1.0, 1.0, 1.0), TAU)
    with pytest.raises(BoxError):
        check_in_box(GrayboxParams(0.0, 1.0, 1.0, 1.0, 1.0))


def test_fitted_state_tracks_plant(moc_data):
    log, x_end = moc_data
    x = fitted_state(log, TRUE, model_step=TAU)
    np.testing.assert_allclose(x, x_end, atol=1e-12)


def test_model_output_and_reinit():
    m = MassOnCarModel(TRUE)
    x = np.array([0.5, 0.1, 1.0, -0.2])
    c = math.cos(TRUE.theta)
    assert m.output(x)[0] == pytest.approx(0.5 + c)
    assert m.output_rate(x)[0] == pytest.approx(0.1 - 0.2 * c)
    x2 = m.reinit([2.0], x_pred=x, ydot=[0.3])
    assert m.output(x2)[0] == pytest.approx(2.0)
    assert m.output_rate(x2)[0] == pytest.approx(0.3)
    np.testing.assert_array_equal(x2[2:], x[2:])


def test_model_rhs_matches_plant(rng):
    plant = mass_on_car_plant(MassOnCarParams())
    m = MassOnCarModel(TRUE)
    x, u = rng.normal(size=4), rng.normal(size=1)
    np.testing.assert_allclose(m.rhs(x, u), plant.rhs(0.0, x, u), rtol=1e-13)


def test_params_vector_round_trip():
    v = TRUE.vector()
    assert GrayboxParams.from_vector(v) == TRUE


def test_checkpoint_round_trip_linear(tmp_path):
    m = LinearSurrogate([[0.1]], [[0.2, -0.3]], [[1.5]], [0.4], -np.array([[2.0, 0.1], [0.1, 3.0]]),
                        [[0.01], [0.02]], [0.5, 0.6], [0.02, 0.9])
    b = ClassBounds(1.3, 1.4, 1.0, 0.0025, 0.91, 408.6, 735.0, 3.0)
    p = write_model(tmp_path / "m.txt", m, b, t=0.5)
    m2, b2 = read_model(p)
    for k, v in m.blocks().items():
        np.testing.assert_array_equal(m2.blocks()[k], v)
    assert b2 == b
    assert p.read_text().startswith("# fmpc-model v1")


def test_checkpoint_round_trip_graybox():
    p, b = loads(dumps(TRUE))
    assert p == TRUE and b is None


@pytest.mark.parametrize("text", ["", "# other\n", "# fmpc-model v1\nkind linear\nm 1\nnu 0\n",
                                  "# fmpc-model v1\nkind linear\nm 1\nnu 0\nR 1 1 : 1 2\n",
                                  "# fmpc-model v1\nkind spline\n"])
def test_checkpoint_errors(text):
    with pytest.raises(CheckpointError):
        loads(text)
