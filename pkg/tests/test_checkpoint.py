import struct

import numpy as np
import pytest

from wrtrain import autodiff as ad
from wrtrain.checkpoint import (VERSION, Checkpoint, CheckpointError, from_bytes,
                                load_checkpoint, save_checkpoint, to_bytes)
from wrtrain.model import Seq2SeqTransformer
from wrtrain.optim import Adam, clip_grad_norm, global_grad_norm

from conftest import tiny_config


def full_checkpoint(model):
    opt = Adam(model.params)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    opt.step()
    rng = np.random.default_rng(3)
    rng.random(5)
    return Checkpoint.from_model(model, step=7, stage="wr", train_config={"lr": 1e-3},
                                 optimizer=opt.state_dict(), rng_state=rng.bit_generator.state,
                                 vocab=["[PAD]", "x"], extra={"note": "t"})


def test_roundtrip_bit_exact(tiny_model, tmp_path):
    ckpt = full_checkpoint(tiny_model)
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    for k, v in ckpt.params.items():
        assert loaded.params[k].dtype == v.dtype
        np.testing.assert_array_equal(loaded.params[k], v)
    for k in ckpt.optimizer["m"]:
        np.testing.assert_array_equal(loaded.optimizer["m"][k], ckpt.optimizer["m"][k])
    assert loaded.optimizer["t"] == 1 and loaded.step == 7 and loaded.stage == "wr"
    assert loaded.rng_state == ckpt.rng_state and loaded.vocab == ckpt.vocab
    assert loaded.model_config == ckpt.model_config
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_float64_params_survive(tmp_path):
    with ad.precision(64):
        m = Seq2SeqTransformer(tiny_config(), dtype=np.float64)
    blob = to_bytes(Checkpoint.from_model(m))
    restored = from_bytes(blob).build_model()
    assert restored.dtype == np.float64
    np.testing.assert_array_equal(restored.params["embed"].data, m.params["embed"].data)


def test_corruption_detected(tiny_model):
    blob = bytearray(to_bytes(Checkpoint.from_model(tiny_model)))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(CheckpointError):
        from_bytes(bytes(blob[:20]))


def test_version_mismatch(tiny_model):
    import hashlib

    blob = to_bytes(Checkpoint.from_model(tiny_model))[:-32]
    body = blob[:4] + struct.pack("<I", VERSION + 1) + blob[8:]
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(body + hashlib.sha256(body).digest())


def test_config_mismatch(tiny_model, tmp_path):
    save_checkpoint(Checkpoint.from_model(tiny_model), tmp_path / "c.ckpt")
    with pytest.raises(CheckpointError, match="vocab_size"):
        load_checkpoint(tmp_path / "c.ckpt", expect_config=tiny_config(vocab_size=21))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_adam_first_step_moves_by_lr():
    p = ad.parameter(np.array([1.0, -2.0]), dtype=np.float64)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -3.0])
    opt.step()
    # the first bias-corrected update is lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_adam_skips_params_without_grad_and_lr_zero():
    p = ad.parameter(np.array([1.0]), dtype=np.float64)
    q = ad.parameter(np.array([2.0]), dtype=np.float64)
    opt = Adam({"p": p, "q": q}, lr=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == 1.0 and q.data[0] == 2.0
    with pytest.raises(ValueError):
        Adam({"p": p}, lr=-1)


def test_clip_grad_norm_exact():
    a = ad.parameter(np.array([3.0, 0.0]), dtype=np.float64)
    b = ad.parameter(np.array([4.0]), dtype=np.float64)
    a.grad, b.grad = a.data.copy(), b.data.copy()
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert global_grad_norm([a, b]) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)
    np.testing.assert_allclose(b.grad, [0.8])
