import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robusteval.config import ConfigError, ExperimentConfig, load_config
from robusteval.data import IdxFormatError, gen_synthetic, load_idx, read_idx, write_idx
from robusteval.network import build_network, predict
from robusteval.training import TrainConfig, train


# IDX

def _idx(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload


def test_idx_header_is_canonical(tmp_path):
    # hand-assembled header: 0x00000803, three big-endian dimensions
    path = tmp_path / "img.idx"
    path.write_bytes(_idx(0x803, (2, 28, 28), bytes(2 * 28 * 28)))
    arr = read_idx(path)
    assert arr.shape == (2, 28, 28) and arr.dtype == np.uint8
    lab = tmp_path / "lab.idx"
    lab.write_bytes(_idx(0x801, (2,), bytes([9, 3])))
    x, y = load_idx(path, lab)
    assert x.shape == (2, 28, 28) and np.all(x == 0)
    assert y.tolist() == [9, 3]


@pytest.mark.parametrize("dtype", [np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64])
def test_idx_roundtrip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) % 100).astype(dtype)
    write_idx(tmp_path / "a.idx", arr)
    back = read_idx(tmp_path / "a.idx")
    assert back.dtype == arr.dtype
    np.testing.assert_array_equal(back, arr)


def test_images_scale_to_unit_interval(tmp_path):
    write_idx(tmp_path / "i", np.array([[[0, 255], [51, 102]]], dtype=np.uint8))
    write_idx(tmp_path / "l", np.array([1], dtype=np.uint8))
    x, _ = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(x[0], [[0, 1], [0.2, 0.4]])


def test_idx_errors_name_offsets(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"\x00\x00")
    with pytest.raises(IdxFormatError, match="offset 0"):
        read_idx(p)
    p.write_bytes(_idx(0x803, (2, 2, 2), bytes(5)))
    with pytest.raises(IdxFormatError, match="offset"):
        read_idx(p)
    p.write_bytes(_idx(0x803, (1, 1, 1), bytes(2)))
    with pytest.raises(IdxFormatError, match="trailing"):
        read_idx(p)
    p.write_bytes(b"\x01\x00\x08\x01" + bytes(8))
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(p)


def test_load_idx_checks_magic_and_counts(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l", np.zeros(2, dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="count"):
        load_idx(tmp_path / "i", tmp_path / "l")
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(tmp_path / "l", tmp_path / "i")


def test_digits_fixture_loads(digits_idx):
    x, y = load_idx(*digits_idx)
    assert x.shape == (1797, 8, 8) and x.max() == 1.0 and set(y.tolist()) == set(range(10))


# synthetic data

def test_synthetic_is_seeded():
    a = gen_synthetic(3, 4, 0.5, 50, seed=2)
    b = gen_synthetic(3, 4, 0.5, 50, seed=2)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].min() >= 0 and a[0].max() <= 1
    assert np.bincount(a[1]).tolist() == [17, 17, 16]


# the line layout (dims < classes) spans separation * (classes - 1), which must fit in [0, 1]
@pytest.mark.parametrize("classes,dims,sep,sigma", [(2, 2, 0.6, 0.05), (3, 3, 0.6, 0.05), (4, 2, 0.3, 0.02)])
def test_class_separation_controls_learnability(classes, dims, sep, sigma):
    def acc(sep, seed):
        x, y = gen_synthetic(classes, dims, sep, 400, seed=seed, sigma=sigma)
        xt, yt = gen_synthetic(classes, dims, sep, 400, seed=seed + 1, sigma=sigma)
        net, _ = train(build_network(f"affine({dims},{classes})", seed=0), x, y, TrainConfig(epochs=30))
        return np.mean(predict(net, xt) == yt)

    assert acc(0.0, 0) < 1.0 / classes + 0.1
    assert acc(sep, 0) > 0.99


def test_synthetic_rejects_bad_shapes():
    with pytest.raises(ValueError):
        gen_synthetic(classes=1)


# config

def test_config_defaults_validate():
    ExperimentConfig().validate()


def test_config_text_example(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\n\ntrain.epochs=10\nattack.epsilons=0.05, 0.1\nsweep.axis=width\nsweep.values=0.5,1,2\n"
                    "attack.random_start=false\nmodel.input_shape=1,8,8\n")
    cfg = load_config(path)
    assert cfg.train.epochs == 10
    assert cfg.attack.epsilons == (0.05, 0.1)
    assert cfg.sweep.values == (0.5, 1, 2)
    assert cfg.attack.random_start is False
    assert cfg.model.input_shape == (1, 8, 8)


@pytest.mark.parametrize("text", ["nokey", "train.bogus=1", "bogus.epochs=1", "train.epochs=ten",
                                  "attack.random_start=maybe"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text)


@pytest.mark.parametrize("text", ["sweep.axis=width\nsweep.values=1,0.5", "sweep.axis=depth\nsweep.values=1",
                                  "sweep.axis=width", "attack.epsilons=0.2,0.1", "attack.loss=hinge",
                                  "data.kind=idx", "train.learning_rate=-1", "model.precision=binary16"])
def test_config_validation_errors(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(text).validate()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


values = st.lists(st.floats(0.001, 100, allow_nan=False), min_size=1, max_size=4, unique=True).map(sorted).map(tuple)


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.floats(1e-4, 1.0), values, st.booleans(), st.sampled_from(["width", "prune", "none"]),
       st.text("abcxyz_-", min_size=1, max_size=10))
def test_config_roundtrip(seed, lr, vals, start, axis, name):
    cfg = ExperimentConfig(name=name)
    cfg.train.learning_rate = lr
    cfg.train.seed = seed
    cfg.attack.epsilons = vals
    cfg.attack.random_start = start
    cfg.sweep.axis = axis
    cfg.sweep.values = vals
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_with_seed_overrides_every_seed():
    cfg = ExperimentConfig().with_seed(42)
    assert {cfg.data.seed, cfg.model.seed, cfg.train.seed, cfg.attack.seed} == {42}
    assert ExperimentConfig().train.seed == 0
