import numpy as np
import pytest

from wrtrain import autodiff as ad
from wrtrain.data import EncodedTriple
from wrtrain.model import ModelConfig, Seq2SeqTransformer


def tiny_config(**kw):
    base = dict(vocab_size=20, d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=2,
                d_ffn=16, max_len=12, dropout=0.0, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return Seq2SeqTransformer(tiny_config())


@pytest.fixture
def tiny_model64():
    with ad.precision(64):
        yield Seq2SeqTransformer(tiny_config(), dtype=np.float64)


def random_triples(n, rng, vocab_size=20, n_neg=1):
    def seq(lo, hi):
        return tuple(int(t) for t in rng.integers(5, vocab_size, size=int(rng.integers(lo, hi + 1))))

    return [EncodedTriple(seq(2, 6), seq(1, 5), tuple(seq(1, 5) for _ in range(n_neg)), f"s{i}")
            for i in range(n)]
