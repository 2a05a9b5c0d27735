import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from wrtrain import autodiff as ad
from wrtrain import data as D
from wrtrain.data import BOS_ID, EOS_ID, UNK_ID
from wrtrain.decoding import DecodeConfig, greedy_decode, greedy_decode_batch, penalize, strip_eos
from wrtrain.model import ModelConfig
from wrtrain.training import TrainConfig, pretrain


class ScriptedModel:
    """Every step returns the same next-token distribution ``probs``."""

    def __init__(self, probs, max_len=30):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.config = ModelConfig(vocab_size=len(probs), d_model=4, n_heads=1, max_len=max_len)
        self.training = False
        self.calls = 0

    def eval(self):
        self.training = False

    def train(self, rng=None):
        self.training = True

    def encode_texts(self, xs):
        ids, mask = D.pad_batch(xs)
        return ad.Tensor(np.zeros((len(xs), ids.shape[1], 4))), mask

    def logits_batch(self, memory, mem_mask, y_in, y_mask):
        self.calls += 1
        with np.errstate(divide="ignore"):
            logp = np.maximum(np.log(self.probs), -1e9)
        logits = np.broadcast_to(logp, (y_in.shape[0], y_in.shape[1], len(self.probs)))
        return ad.Tensor(logits.copy(), dtype=np.float64)


def dist(**entries):
    p = np.zeros(12)
    for k, v in entries.items():
        p[int(k[1:])] = v
    return p


def test_penalize_examples():
    p = np.array([0.5, 0.3, 0.2])
    np.testing.assert_array_equal(penalize(p, [0, 0, 0], 5), p)
    assert penalize(p, [1, 0, 0], 5)[0] == 0.5 / 6
    assert penalize(p, [2, 0, 0], 5)[0] == 0.5 / 11
    np.testing.assert_array_equal(penalize(p, [3, 1, 2], 0), p)
    with pytest.raises(ValueError):
        penalize(p, [-1, 0, 0], 5)
    with pytest.raises(ValueError):
        penalize(p, [0, 0, 0], -1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(0.01, 1)),
       arrays(np.int64, 8, elements=st.integers(0, 4)),
       st.floats(1e-3, 1e3), st.floats(0, 10))
def test_penalize_argmax_scale_invariant(p, counts, c, k):
    p = p / p.sum()
    assert np.argmax(penalize(c * p, counts, k)) == np.argmax(penalize(p, counts, k))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.1, 10))
def test_penalize_decreasing_in_count(p, k):
    scores = [penalize(np.array([p]), np.array([n]), k)[0] for n in range(6)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(max_len=0)
    with pytest.raises(ValueError):
        DecodeConfig(k=-0.1)


def test_second_emission_needs_p_over_six():
    # 0.7 / 6 > 0.1: the top token repeats, then 0.7 / 11 < 0.1 hands over to the runner-up
    m = ScriptedModel(dist(t7=0.7, t8=0.1, t9=0.1, t10=0.1))
    assert greedy_decode(m, [5], DecodeConfig(k=5, max_len=3)) == [7, 7, 8]
    m = ScriptedModel(dist(t7=0.7, t8=0.2, t2=0.1))
    assert greedy_decode(m, [5], DecodeConfig(k=5, max_len=2)) == [7, 8]


def test_k_zero_is_plain_greedy():
    m = ScriptedModel(dist(t7=0.6, t8=0.3, t2=0.1))
    assert greedy_decode(m, [5], DecodeConfig(k=0, max_len=5)) == [7] * 5


def test_k_zero_matches_manual_argmax_loop(tiny_model):
    tiny_model.eval()
    out = greedy_decode(tiny_model, [5, 6, 7], DecodeConfig(k=0, max_len=8))
    prefix = [BOS_ID]
    memory = tiny_model.encode([5, 6, 7])
    manual = []
    for _ in range(8):
        logits = tiny_model.decode_teacher_forced(memory, prefix[1:] + [0]).data[-1]
        logits[[0, 1, 3, 4]] = -np.inf
        tok = int(np.argmax(logits))
        manual.append(tok)
        if tok == EOS_ID:
            break
        prefix.append(tok)
    assert out == manual


def test_stops_at_eos_and_respects_max_len():
    m = ScriptedModel(dist(t2=0.9, t7=0.1))
    assert greedy_decode(m, [5], DecodeConfig(k=5, max_len=6)) == [EOS_ID]
    m = ScriptedModel(dist(t7=0.5, t8=0.3, t9=0.2))
    out = greedy_decode(m, [5], DecodeConfig(k=5, max_len=6))
    assert len(out) == 6 and EOS_ID not in out


def test_fixed_length_mode_bars_eos():
    m = ScriptedModel(dist(t2=0.9, t7=0.1))
    out = greedy_decode(m, [5], DecodeConfig(k=0, max_len=4, stop_at_eos=False))
    assert out == [7, 7, 7, 7]


def test_barred_tokens_never_emitted():
    m = ScriptedModel(dist(t4=0.5, t0=0.2, t1=0.1, t3=0.1, t9=0.1))
    out = greedy_decode(m, [5], DecodeConfig(k=0, max_len=3))
    assert out == [9, 9, 9]
    assert UNK_ID not in out


def test_lowest_id_breaks_ties():
    m = ScriptedModel(dist(t9=0.4, t6=0.4, t2=0.2))
    assert greedy_decode(m, [5], DecodeConfig(k=0, max_len=2)) == [6, 6]


def test_context_tokens_are_not_counted():
    m = ScriptedModel(dist(t7=0.7, t8=0.2, t2=0.1))
    assert greedy_decode(m, [7, 7, 7], DecodeConfig(k=5, max_len=1)) == [7]


def test_batch_matches_single_and_is_deterministic(tiny_model):
    ctxs = [[5, 6, 7], [8, 9], [10, 11, 12, 13]]
    cfg = DecodeConfig(k=5, max_len=8)
    batch = greedy_decode_batch(tiny_model, ctxs, cfg)
    assert batch == [greedy_decode(tiny_model, c, cfg) for c in ctxs]
    assert batch == greedy_decode_batch(tiny_model, ctxs, cfg)
    for out in batch:
        assert len(out) <= 8 and EOS_ID not in out[:-1]


def test_decode_length_must_fit_model(tiny_model):
    with pytest.raises(ValueError):
        greedy_decode(tiny_model, [5], DecodeConfig(max_len=12))


def test_decode_restores_training_mode(tiny_model):
    tiny_model.train(np.random.default_rng(0))
    greedy_decode(tiny_model, [5, 6], DecodeConfig(max_len=3))
    assert tiny_model.training


def test_strip_eos():
    assert strip_eos([7, 8, EOS_ID]) == [7, 8]
    assert strip_eos([7, 8]) == [7, 8]


def test_penalty_lowers_max_unigram_count_on_trained_model():
    rng = np.random.default_rng(0)
    corpus = D.gen_synthetic(4, 30, rng, pretrain_stories_per_topic=30)
    vocab = D.build_vocab_from_texts([p.context for p in corpus.pairs]
                                     + [p.continuation for p in corpus.pairs])
    pairs = D.encode_pairs(vocab, corpus.pairs, 24)
    mc = ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, d_ffn=32, max_len=24)
    model = pretrain(TrainConfig(stage="pretrain", lr=3e-3, max_steps=60, batch_size=16,
                                 log_every=0), pairs, model_config=mc).checkpoint.build_model()
    ctxs = [list(p.context) for p in pairs[:100]]

    def max_count(k):
        outs = greedy_decode_batch(model, ctxs, DecodeConfig(k=k, max_len=20))
        return np.array([max(np.bincount(strip_eos(o) or [0])) for o in outs])

    assert np.mean(max_count(5.0) <= max_count(0.0)) >= 0.95
