import numpy as np
import pytest

from doserlab.dynamics import DynamicsModel, Regressor, fit_regressor, predict, train_dynamics
from doserlab.errors import RejectedInput, StateError, TrainingDivergence
from doserlab.toyworld import Dataset, NavEnv, gen_dataset


@pytest.fixture(scope="module")
def trained():
    d = gen_dataset("medium", 20000, seed=31)
    rng = np.random.default_rng(31)
    model = DynamicsModel.create(1, 1, rng)
    trace = train_dynamics(model, d, steps=4000, batch_size=256, rng=rng, lr=1e-3, snapshot_steps=(500, 2000))
    return model, trace


def test_loss_decreases(trained):
    _, trace = trained
    assert np.all(np.isfinite(trace))
    assert trace[:50].mean() > 10 * trace[-50:].mean()


def test_held_out_next_state_mse(trained):
    model, _ = trained
    held = gen_dataset("medium", 5000, seed=99)
    s2, r = predict(model, held.s, held.a)
    assert np.mean((s2 - held.s2) ** 2) < 1e-3
    assert np.mean((r - held.r) ** 2) < 1e-2


def test_slope_probe_linear_dynamics():
    rng = np.random.default_rng(5)
    s = rng.uniform(-5, 5, (8000, 1))
    a = rng.uniform(-1, 1, (8000, 1))
    d = Dataset(s, a, -np.abs(s + a).ravel(), s + a, np.zeros(8000))
    model = DynamicsModel.create(1, 1, rng)
    train_dynamics(model, d, steps=3000, batch_size=256, rng=rng, lr=1e-3)
    h = 1e-2
    ps = np.linspace(-3, 3, 25)[:, None]
    pa = np.linspace(-0.5, 0.5, 25)[:, None]
    ds = (predict(model, ps + h, pa)[0] - predict(model, ps - h, pa)[0]) / (2 * h)
    da = (predict(model, ps, pa + h)[0] - predict(model, ps, pa - h)[0]) / (2 * h)
    assert abs(np.median(ds) - 1) < 0.05
    assert abs(np.median(da) - 1) < 0.05


def test_predict_idempotent_and_clamped(trained):
    model, _ = trained
    s, a = np.array([[9.9], [0.0]]), np.array([[1.0], [0.5]])
    first = predict(model, s, a)
    second = predict(model, s, a)
    assert np.array_equal(first[0], second[0]) and np.array_equal(first[1], second[1])
    far = predict(model, np.array([[10.0]]), np.array([[25.0]]))[0]
    assert far[0, 0] <= NavEnv().state_high


def test_snapshots_are_earlier_models(trained):
    model, _ = trained
    assert sorted(model.snapshots) == [500, 2000]
    held = gen_dataset("medium", 2000, seed=98)
    errs = [np.mean((predict(m, held.s, held.a)[0] - held.s2) ** 2)
            for m in (model.snapshots[500], model)]
    assert errs[0] > errs[1]
    assert model.snapshots[500].training_steps_done == 500


def test_untrained_and_shape_errors():
    model = DynamicsModel.create(1, 1, np.random.default_rng(0))
    with pytest.raises(StateError):
        predict(model, np.zeros((1, 1)), np.zeros((1, 1)))
    model.training_steps_done = 1
    with pytest.raises(RejectedInput):
        predict(model, np.zeros((2, 1)), np.zeros((1, 1)))


def test_divergence_reports_step():
    rng = np.random.default_rng(0)
    reg = Regressor.create(1, 1, rng, hidden=(4,))
    x = np.linspace(0, 1, 10)[:, None]
    y = np.full((10, 1), np.nan)
    with pytest.raises(TrainingDivergence) as info:
        fit_regressor(reg, x, y, steps=3, batch_size=4, rng=rng)
    assert info.value.step == 0
