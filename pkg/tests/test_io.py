import json
import struct
from pathlib import Path

import numpy as np
import pytest

from resfields.io import (
    MAGIC,
    CheckpointError,
    DataConfig,
    ModelConfig,
    RunConfig,
    load_checkpoint,
    load_config,
    parse_checkpoint,
    save_checkpoint,
)
from resfields.models import FlowHead, ResFieldSpec, build_relu_pe, build_siren
from resfields.optim import TrainConfig, train
from resfields.resfield import ChunkedSchedule

DATA = Path(__file__).parent / "data"


def trained_model():
    m = build_siren(8, 3, 3, 2, ResFieldSpec(layers=(1,), n_factors=4), seed=2,
                    chunks=ChunkedSchedule(2, "both"))
    rng = np.random.default_rng(0)
    X = np.column_stack([np.repeat(np.linspace(-1, 1, 4), 10), rng.uniform(-1, 1, (40, 2))])
    y = rng.normal(size=(40, 2))
    train(m, (X, y), TrainConfig(iterations=5, batch_size=8, frames_per_batch=4))
    return m, X


def test_round_trip_is_bitwise(tmp_path):
    m, X = trained_model()
    a, b = tmp_path / "a.rfck", tmp_path / "b.rfck"
    save_checkpoint(a, m, step=5, run_config={"task": "video"})
    ck = load_checkpoint(a)
    r = ck.model()
    assert ck.step == 5 and ck.config["run"] == {"task": "video"}
    assert all(np.array_equal(m.params[k], r.params[k]) for k in m.params)
    assert np.array_equal(m(X), r(X))
    assert r.optimizer.step == m.optimizer.step == 5
    assert all(np.array_equal(m.optimizer.v[k], r.optimizer.v[k]) for k in m.params)
    save_checkpoint(b, r, step=5, run_config={"task": "video"})
    assert a.read_bytes() == b.read_bytes()


def test_flow_model_round_trip(tmp_path):
    m = build_relu_pe(8, 4, (2, 1), FlowHead("dct", 4), ResFieldSpec(n_factors=3))
    save_checkpoint(tmp_path / "f.rfck", m)
    r = load_checkpoint(tmp_path / "f.rfck").model()
    X = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    assert np.array_equal(m(X), r(X))
    assert r.optimizer is None


def test_float32_storage(tmp_path):
    m, X = trained_model()
    save_checkpoint(tmp_path / "s.rfck", m, dtype="f32")
    ck = load_checkpoint(tmp_path / "s.rfck")
    k = next(iter(m.params))
    assert ck.tensors["param/" + k].dtype == np.dtype("<f4")
    np.testing.assert_array_equal(ck.model().params[k], m.params[k].astype(np.float32))


def test_structured_errors(tmp_path):
    m, _ = trained_model()
    save_checkpoint(tmp_path / "a.rfck", m)
    buf = (tmp_path / "a.rfck").read_bytes()
    with pytest.raises(CheckpointError) as e:
        parse_checkpoint(b"XXXX" + buf[4:])
    assert e.value.offset == 0
    with pytest.raises(CheckpointError) as e:
        parse_checkpoint(buf[:4] + struct.pack("<I", 9) + buf[8:])
    assert e.value.offset == 4
    for cut in (2, 10, 40, len(buf) - 1):
        with pytest.raises(CheckpointError, match="truncated") as e:
            parse_checkpoint(buf[:cut])
        assert 0 <= e.value.offset <= cut
    with pytest.raises(CheckpointError, match="trailing") as e:
        parse_checkpoint(buf + b"\0")
    assert e.value.offset == len(buf)


def test_golden_fixture_parses():
    ck = load_checkpoint(DATA / "golden.rfck")
    raw = (DATA / "golden.rfck").read_bytes()
    assert raw[:4] == MAGIC and struct.unpack("<I", raw[4:8])[0] == 1
    assert ck.step == 3
    assert ck.config["adam"] == {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "step": 3}
    m = ck.model()
    assert sorted(m.params) == ["layers.0.W", "layers.0.b", "layers.0.res.M", "layers.0.res.v",
                                "layers.1.W", "layers.1.b"]
    for i, k in enumerate(sorted(m.params)):
        p = m.params[k]
        ref = (np.arange(p.size, dtype=float).reshape(p.shape) - i) * 0.125
        assert np.array_equal(p, ref)
        assert np.all(m.optimizer.m[k] == 0.5) and np.all(m.optimizer.v[k] == 0.25)
    assert m.meta["resfield"]["n_factors"] == 3
    # output of the restored network is a pure function of the stored values
    x = np.array([[0.0, 0.5]])
    W0 = m.params["layers.0.W"] + np.tensordot(m.params["layers.0.res.v"][1],
                                               m.params["layers.0.res.M"], axes=1)
    h = np.sin(30.0 * (W0 @ x[0] + m.params["layers.0.b"]))
    ref = m.params["layers.1.W"] @ h + m.params["layers.1.b"]
    np.testing.assert_allclose(m(x)[0], ref, rtol=1e-12)


def test_golden_fixture_float32():
    f64 = load_checkpoint(DATA / "golden.rfck").model()
    f32 = load_checkpoint(DATA / "golden_f32.rfck")
    assert "adam" not in f32.config
    m = f32.model()
    # the fixture values are exactly representable in single precision
    assert all(np.array_equal(m.params[k], f64.params[k]) for k in m.params)


def test_missing_parameter_is_reported(tmp_path):
    m, _ = trained_model()
    save_checkpoint(tmp_path / "a.rfck", m)
    ck = load_checkpoint(tmp_path / "a.rfck")
    del ck.tensors["param/chunk1.layers.0.W"]
    with pytest.raises(KeyError, match="chunk1.layers.0.W"):
        ck.model()


# -- run configuration -----------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = RunConfig(task="sdf", seed=4, model=ModelConfig(factorization="tucker", factors="95%"),
                    data=DataConfig(frames=12))
    assert RunConfig.from_json(cfg.to_json()) == cfg
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    assert load_config(p) == cfg
    assert json.loads(cfg.to_json())["model"]["factors"] == "95%"


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(task="nerf")
    with pytest.raises(ValueError):
        RunConfig(model=ModelConfig(factorization="lowrank", mode="direct"))
    RunConfig(model=ModelConfig(factorization="dictionary", mode="direct"))
    with pytest.raises(ValueError, match="colour"):
        RunConfig.from_dict({"colour": 1})
    with pytest.raises(ValueError, match="depthh"):
        RunConfig.from_dict({"model": {"depthh": 3}})
