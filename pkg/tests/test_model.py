import numpy as np
import pytest

from wrtrain import autodiff as ad
from wrtrain.losses import triplet_cos
from wrtrain.model import ModelConfig, Seq2SeqTransformer, parameter_count
from wrtrain.optim import Adam

from conftest import tiny_config


def brute_force_count(cfg):
    return Seq2SeqTransformer(cfg).num_parameters()


@pytest.mark.parametrize("g", ["hadamard", "linear_projection"])
@pytest.mark.parametrize("layers", [(1, 1), (2, 3)])
def test_parameter_count_closed_form(g, layers):
    cfg = tiny_config(g_mapping=g, n_enc_layers=layers[0], n_dec_layers=layers[1])
    assert parameter_count(cfg) == brute_force_count(cfg)


def test_parameter_count_hand_value():
    # V=20, d=8, f=16, 2+2 layers, linear g with d_rep=d
    d, f, V = 8, 16, 20
    attn, ffn, ln = 4 * d * d + 4 * d, 2 * d * f + f + d, 2 * d
    expected = V * d + 2 * (attn + ffn + 2 * ln) + 2 * (2 * attn + ffn + 3 * ln) + 2 * ln \
        + d * V + V + d * d
    assert expected == 3444 == parameter_count(tiny_config())


@pytest.mark.parametrize("bad", [dict(n_heads=3), dict(dropout=1.0), dict(g_mapping="mlp"),
                                 dict(vocab_size=0), dict(max_len=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        tiny_config(**bad)


def test_config_dict_roundtrip_rejects_unknown():
    cfg = tiny_config(d_rep=5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**cfg.to_dict(), "colour": 1})


def test_encode_shape_and_determinism(tiny_model):
    a = tiny_model.encode([5, 6, 7]).data
    assert a.shape == (3, 8)
    np.testing.assert_array_equal(a, tiny_model.encode([5, 6, 7]).data)


def test_positional_encoding_active(tiny_model):
    a = tiny_model.encode([5, 6, 7]).data
    b = tiny_model.encode([6, 5, 7]).data
    assert not np.allclose(a[[1, 0, 2]], b)


def test_encode_rejects_bad_input(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.encode([5, 20])
    with pytest.raises(ValueError):
        tiny_model.encode([5] * 13)
    with pytest.raises(ValueError):
        tiny_model.encode([])


def test_teacher_forced_shape(tiny_model):
    logits = tiny_model.decode_teacher_forced(tiny_model.encode([5, 6]), [7, 8, 9, 10])
    assert logits.shape == (4, 20)


@pytest.mark.parametrize("j", [0, 2, 4])
def test_causality_is_exact(tiny_model, j):
    mem = tiny_model.encode([5, 6, 7])
    y = [8, 9, 10, 11, 12, 13]
    base = tiny_model.decode_teacher_forced(mem, y).data
    y2 = list(y)
    y2[j] = 17
    other = tiny_model.decode_teacher_forced(mem, y2).data
    # row i sees y_<i, so rows 0..j are untouched
    np.testing.assert_array_equal(base[: j + 1], other[: j + 1])
    if j + 1 < len(y):
        assert not np.array_equal(base[j + 1:], other[j + 1:])


def test_padding_does_not_change_outputs(tiny_model):
    memory, mask = tiny_model.encode_texts([[5, 6, 7], [8, 9]])
    alone = tiny_model.encode([8, 9]).data
    np.testing.assert_allclose(memory.data[1, :2], alone, atol=1e-6)
    reps = tiny_model.represent_batch(memory, mask, [[10, 11], [12]]).data
    np.testing.assert_allclose(reps[1], tiny_model.represent([8, 9], [12]).data, atol=1e-6)


def test_represent_shapes():
    m = Seq2SeqTransformer(tiny_config(g_mapping="hadamard"))
    assert m.represent([5, 6], [7]).shape == (8,)
    m = Seq2SeqTransformer(tiny_config(d_rep=5))
    assert m.represent([5, 6], [7]).shape == (5,)


def test_represent_depends_on_both_inputs(tiny_model):
    r = tiny_model.represent([5, 6, 7], [8, 9]).data
    assert not np.allclose(r, tiny_model.represent([5, 6, 7], [8, 10]).data)
    assert not np.allclose(r, tiny_model.represent([5, 6, 11], [8, 9]).data)


def test_hadamard_init_is_identity():
    m = Seq2SeqTransformer(tiny_config(g_mapping="hadamard"))
    h = ad.Tensor(np.arange(8.0))
    np.testing.assert_array_equal(m.map_g(h).data, h.data)


def test_representation_gradient_reaches_every_part(tiny_model):
    a = tiny_model.represent([5, 6], [7, 8])
    p = tiny_model.represent([5, 6], [9])
    n = tiny_model.represent([5, 6], [10, 11, 12])
    ad.backward(triplet_cos(a, p, n))
    for name in ("embed", "enc.0.self.wq", "dec.1.self.wv", "dec.0.cross.wk", "g.w"):
        g = tiny_model.params[name].grad
        assert g is not None and np.any(g != 0), name
    assert tiny_model.params["head.w"].grad is None


def test_g_changes_after_one_triplet_step(tiny_model):
    before = tiny_model.params["g.w"].data.copy()
    loss = triplet_cos(tiny_model.represent([5, 6], [7, 8]), tiny_model.represent([5, 6], [9]),
                       tiny_model.represent([5, 6], [10, 11]))
    ad.backward(loss)
    Adam(tiny_model.params, lr=1e-2).step()
    assert not np.array_equal(before, tiny_model.params["g.w"].data)


def test_same_seed_same_weights():
    a = Seq2SeqTransformer(tiny_config(seed=3)).state_dict()
    b = Seq2SeqTransformer(tiny_config(seed=3)).state_dict()
    c = Seq2SeqTransformer(tiny_config(seed=4)).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["embed"], c["embed"])


def test_state_dict_roundtrip_and_mismatch(tiny_model):
    other = Seq2SeqTransformer(tiny_config(seed=9))
    other.load_state_dict(tiny_model.state_dict())
    np.testing.assert_array_equal(other.encode([5, 6]).data, tiny_model.encode([5, 6]).data)
    with pytest.raises(ValueError):
        other.load_state_dict({k: v for k, v in tiny_model.state_dict().items() if k != "g.w"})


def test_astype_64_matches_32(tiny_model):
    m64 = tiny_model.astype(np.float64)
    assert m64.params["embed"].dtype == np.float64
    np.testing.assert_allclose(m64.encode([5, 6, 7]).data, tiny_model.encode([5, 6, 7]).data,
                               atol=1e-5)


def test_dropout_only_in_training():
    m = Seq2SeqTransformer(tiny_config(dropout=0.5))
    ref = m.encode([5, 6, 7]).data
    m.train(np.random.default_rng(0))
    assert not np.allclose(m.encode([5, 6, 7]).data, ref)
    m.eval()
    np.testing.assert_array_equal(m.encode([5, 6, 7]).data, ref)
