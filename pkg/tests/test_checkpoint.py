import struct

import numpy as np
import pytest

from magicnav.checkpoint import MAGIC, VERSION, CheckpointError, load_checkpoint, restore_optimizer, save_checkpoint
from magicnav.model import AgentModel, ModelConfig
from magicnav.optim import AdamW

CFG = ModelConfig(hidden=8, heads=2)


@pytest.fixture
def saved(tmp_path):
    model = AgentModel(CFG, seed=3)
    opt = AdamW(dict(model.named_parameters()), lr=1e-3)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    opt.step()
    rng = np.random.default_rng(9)
    rng.random(5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, opt, rng, iteration=7, arrays={"extra/x": np.arange(6.0).reshape(2, 3)},
                    extra={"note": "hi"})
    return path, model, opt, rng


def test_roundtrip_is_exact(saved):
    path, model, opt, rng = saved
    ck = load_checkpoint(path)
    assert ck.iteration == 7 and ck.extra == {"note": "hi"} and ck.model_config == CFG
    rebuilt = ck.build_model()
    for k, v in model.state_dict().items():
        assert np.array_equal(v, rebuilt.state_dict()[k])
    assert np.array_equal(ck.arrays["extra/x"], np.arange(6.0).reshape(2, 3))
    assert ck.rng().random() == rng.random()


def test_optimizer_state_restores(saved):
    path, model, opt, _ = saved
    fresh = AgentModel(CFG, seed=3)
    other = AdamW(dict(fresh.named_parameters()), lr=5.0)
    restore_optimizer(load_checkpoint(path), other)
    assert other.state.step == opt.state.step and other.state.lr == opt.state.lr
    for k, v in opt.state_arrays().items():
        assert np.array_equal(v, other.state_arrays()[k])


def test_same_content_same_bytes(tmp_path):
    m = AgentModel(CFG, seed=1)
    save_checkpoint(tmp_path / "a", m, iteration=1)
    save_checkpoint(tmp_path / "b", m, iteration=1)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_corruption_detected(saved):
    path, *_ = saved
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [0.99, 0.5, 0.01])
def test_truncation_detected(saved, keep):
    path, *_ = saved
    data = path.read_bytes()
    path.write_bytes(data[: int(len(data) * keep)])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_mismatch(saved):
    path, *_ = saved
    data = bytearray(path.read_bytes())
    data[len(MAGIC): len(MAGIC) + 4] = struct.pack("<I", VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"hello world" * 10)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(p)


def test_missing_optimizer_state(tmp_path):
    m = AgentModel(CFG, seed=1)
    save_checkpoint(tmp_path / "a", m)
    with pytest.raises(CheckpointError):
        restore_optimizer(load_checkpoint(tmp_path / "a"), AdamW(dict(m.named_parameters())))
