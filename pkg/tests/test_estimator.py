import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from resfields import NeuralFieldRegressor, SceneFlowRegressor
from resfields.data import gen_flow, gen_video
from resfields.estimator import FlowObjective, resolve_factors
from resfields.gradcheck import numeric_grad, rel_error
from resfields.models import FlowHead, ResFieldSpec, build_relu_pe


def test_resolve_factors():
    assert resolve_factors(None, 30) == 30
    assert resolve_factors(12, 30) == 12
    assert resolve_factors("95%", 300) == 285
    assert resolve_factors("10%", 30) == 3
    assert resolve_factors("1%", 30) == 2
    assert resolve_factors(0.5, 31) == 16  # half rounds up
    assert resolve_factors("7", 30) == 7
    for bad in ("0%", "150%", 0, -1, 0.0):
        with pytest.raises(ValueError):
            resolve_factors(bad, 30)


def test_params_and_clone():
    est = NeuralFieldRegressor(width=16, rank=4, factorization="cp")
    assert est.get_params()["rank"] == 4
    c = clone(est.set_params(width=8))
    assert c.width == 8 and c.factorization == "cp"
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((2, 3)))


def small_video():
    return gen_video(0, F=4, H=8, W=8, holdout=0.25, n_blobs=2, n_gratings=1)


def test_fit_predict_shapes_and_history():
    ds = small_video()
    X, y = ds.arrays("train")
    est = NeuralFieldRegressor(width=8, depth=3, iterations=6, batch_size=16, frames_per_batch=4,
                               log_every=2, resfield_layers=(1,), rank=2)
    est.fit(X, y)
    assert est.n_frames_ == 4 and est.n_features_in_ == 3
    assert est.predict(X[:5]).shape == (5, 3)
    assert [r["step"] for r in est.history_] == [2, 4, 6]
    assert est.model_.params["layers.1.res.v"].shape == (4, 2)
    single = clone(est).fit(X, y[:, 0])
    assert single.predict(X[:5]).shape == (5,)
    with pytest.raises(ValueError):
        est.predict(X[:, :2])


def test_fit_is_deterministic():
    X, y = small_video().arrays("train")
    kw = dict(width=8, depth=4, iterations=5, batch_size=16, frames_per_batch=4, rank=2)
    a = NeuralFieldRegressor(**kw).fit(X, y).predict(X)
    b = NeuralFieldRegressor(**kw).fit(X, y).predict(X)
    assert np.array_equal(a, b)


def test_validation_errors():
    est = NeuralFieldRegressor(iterations=1)
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 1)), np.zeros(4))
    with pytest.raises(ValueError, match="time"):
        est.fit(np.full((4, 3), 2.0), np.zeros(4))
    X = np.zeros((4, 3))
    X[0, 1] = np.nan
    with pytest.raises(ValueError):
        est.fit(X, np.zeros(4))
    with pytest.raises(ValueError):
        NeuralFieldRegressor(factorization="lowrank", mode="direct").fit(np.zeros((4, 3)),
                                                                         np.zeros(4))


def test_baseline_has_no_residual_parameters():
    X, y = small_video().arrays("train")
    est = NeuralFieldRegressor(width=8, depth=3, iterations=1, resfield_layers=()).fit(X, y)
    assert not est.model_.has_resfields


def test_scene_flow_regressor():
    ds = gen_flow(0, F=5, P=20)
    X, y = ds.arrays("train")
    est = SceneFlowRegressor(head="se3", width=8, depth=4, pe_levels=(2, 1), iterations=4,
                             batch_size=20, frames_per_batch=5, rank=2)
    est.fit(X, y)
    pred = est.predict(X)
    assert pred.shape == (len(X), 6)
    f = est.objective_.frames(X)
    assert not np.any(pred[f == 4, :3]) and not np.any(pred[f == 0, 3:])
    fw, bw = est.flow_errors(X, y)
    assert fw > 0 and bw > 0
    with pytest.raises(ValueError):
        clone(est).fit(X[:, :3], y)
    with pytest.raises(ValueError):
        clone(est).fit(X, y[:, :3])


@pytest.mark.parametrize("kind", ["offset", "se3", "dct"])
def test_flow_objective_gradients(kind):
    ds = gen_flow(1, F=4, P=12)
    X, y = ds.arrays("train")
    head = FlowHead(kind, n_basis=3)
    m = build_relu_pe(6, 3, (2, 1), head, ResFieldSpec(layers=(1,), n_factors=4, rank=2,
                                                       init_std=0.3), seed=2)
    # move biases off the ReLU kink (glorot biases start at exactly zero)
    rng = np.random.default_rng(0)
    for v in m.params.values():
        v += rng.normal(0, 0.05, v.shape)
    obj = FlowObjective(head, 4)
    _, grads = obj(m, X, y)
    for k, p in m.params.items():
        idx, num = numeric_grad(lambda: obj(m, X, y)[0], p, 1e-7, 10, rng)
        assert rel_error(grads[k].reshape(-1)[idx], num) < 1e-4, k
