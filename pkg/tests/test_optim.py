import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resfields.layers import Linear
from resfields.models import FieldModel, build_siren
from resfields.optim import (
    AdamState,
    Schedule,
    TimeStratifiedSampler,
    TrainConfig,
    TrainingError,
    adam_step,
    cosine_lr,
    stream,
    train,
)


def reference_adam(p, g, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_first_step_magnitude():
    p = {"w": np.array([0.0])}
    adam_step(AdamState(), p, {"w": np.array([1.0])}, 1e-3)
    assert -p["w"][0] == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-14)


def test_matches_scalar_reference():
    p = {"w": np.array([0.3])}
    s = AdamState()
    for _ in range(7):
        adam_step(s, p, {"w": np.array([-0.25])}, 2e-3)
    assert p["w"][0] == pytest.approx(reference_adam(0.3, -0.25, 7, 2e-3), rel=1e-13)
    assert s.step == 7


def test_zero_gradient_keeps_params():
    p = {"w": np.arange(4.0)}
    before = p["w"].copy()
    s = AdamState()
    for _ in range(3):
        adam_step(s, p, {"w": np.zeros(4)}, 1e-2)
    assert np.array_equal(p["w"], before)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6), st.floats(1e-5, 1e-1))
def test_sign_flip_reflects_update(g, lr):
    g = np.array(g)
    a, b = {"w": np.zeros_like(g)}, {"w": np.zeros_like(g)}
    adam_step(AdamState(), a, {"w": g}, lr)
    adam_step(AdamState(), b, {"w": -g}, lr)
    assert np.array_equal(a["w"], -b["w"])


def test_errors_name_the_parameter():
    p = {"layer.W": np.zeros(2)}
    with pytest.raises(TrainingError, match="layer.W"):
        adam_step(AdamState(), p, {"layer.W": np.array([1.0, np.inf])}, 1e-3)
    with pytest.raises(ValueError):
        adam_step(AdamState(), p, {"layer.W": np.zeros(2)}, 0.0)
    with pytest.raises(ValueError, match="layer.W"):
        adam_step(AdamState(), p, {"layer.W": np.zeros(3)}, 1e-3)


def test_cosine_examples():
    s = Schedule(total_steps=1000)
    assert cosine_lr(s, 0) == 5e-4
    assert cosine_lr(s, 1000) == 5e-5
    assert cosine_lr(s, 500) == pytest.approx(2.75e-4, rel=1e-14)
    with pytest.raises(ValueError):
        Schedule(1e-5, 1e-4, 10)
    with pytest.raises(ValueError):
        Schedule(total_steps=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.floats(1e-6, 1e-2), st.floats(0, 1))
def test_cosine_monotone(total, lr0, frac):
    s = Schedule(lr0, lr0 * frac, total)
    lrs = np.array([cosine_lr(s, k) for k in range(total + 1)])
    assert np.all(np.diff(lrs) <= 0)
    assert lrs[0] == s.lr0 and lrs[-1] == s.lr_min


def test_sampler_balances_frames(rng):
    X = np.column_stack([np.repeat(np.linspace(-1, 1, 10), 20), rng.normal(size=200)])
    smp = TimeStratifiedSampler(X, frames_per_batch=4)
    idx = smp.sample(rng, 40)
    _, counts = np.unique(X[idx, 0], return_counts=True)
    assert len(counts) == 4 and np.all(counts == 10)


def linear_problem(seed=0):
    r = stream(seed, "data")
    x = r.uniform(-1, 1, 400)
    t = np.repeat(np.linspace(-1, 1, 8), 50)
    return np.column_stack([t, x]), x[:, None]


def linear_model(seed=0):
    lin = Linear("lin", 2, 1, init="glorot")
    return FieldModel([[lin]], lin.init_params(np.random.default_rng(seed)))


def test_zero_iterations_leave_model_unchanged():
    m = linear_model()
    before = {k: v.copy() for k, v in m.params.items()}
    _, log = train(m, linear_problem(), TrainConfig(iterations=0))
    assert log == []
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_linear_fit_converges():
    X, y = linear_problem()
    m = linear_model()
    cfg = TrainConfig(iterations=2000, batch_size=64, frames_per_batch=8, lr=1e-2, lr_min=1e-4)
    _, log = train(m, (X, y), cfg)
    mse = float(np.mean((m(X) - y) ** 2))
    assert mse < 1e-6
    assert log[-1]["step"] == 2000


def test_training_is_deterministic(tmp_path):
    X, y = linear_problem()
    X = np.column_stack([X, X[:, 1] ** 2])
    logs = []
    for i in range(2):
        m = build_siren(8, 3, 3, 1, seed=5)
        path = tmp_path / f"m{i}.csv"
        cfg = TrainConfig(iterations=30, batch_size=32, frames_per_batch=4, lr=1e-3,
                          lr_min=1e-4, seed=9, log_every=10, metrics_path=str(path))
        _, log = train(m, (X, y), cfg)
        logs.append((log, path.read_text(), m.params))
    assert logs[0][0] == logs[1][0]
    assert logs[0][1] == logs[1][1]
    assert logs[0][1].splitlines()[0] == "step,lr,train_loss"
    assert all(np.array_equal(logs[0][2][k], logs[1][2][k]) for k in logs[0][2])


def test_evaluation_hook_columns(tmp_path):
    X, y = linear_problem()
    path = tmp_path / "m.csv"
    cfg = TrainConfig(iterations=20, batch_size=16, frames_per_batch=4, eval_every=10,
                      log_every=0, metrics_path=str(path))
    _, log = train(linear_model(), (X, y), cfg, evaluate=lambda m: {"psnr": 1.0})
    assert [r["step"] for r in log] == [10, 20]
    assert path.read_text().splitlines()[0] == "step,lr,train_loss,psnr"


def test_nan_loss_aborts_and_keeps_log(tmp_path):
    X, y = linear_problem()
    y = y.copy()
    y[::2] = np.nan
    path = tmp_path / "m.csv"
    m = linear_model()
    before = {k: v.copy() for k, v in m.params.items()}
    with pytest.raises(TrainingError, match="step 0"):
        train(m, (X, y), TrainConfig(iterations=5, batch_size=16, frames_per_batch=4,
                                     metrics_path=str(path)))
    assert path.exists()
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_streams_are_independent():
    a = stream(0, "init").normal(size=5)
    b = stream(0, "batch").normal(size=5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, stream(0, "init").normal(size=5))
