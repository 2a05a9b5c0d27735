import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wrtrain import data as D
from wrtrain.data import EncodedTriple
from wrtrain.decoding import DecodeConfig
from wrtrain.eval import (bleu1, distinct_n, evaluate, preference_accuracy,
                          repeated_ngram_rate, representation_distances)

from conftest import random_triples


def test_bleu1_examples():
    assert bleu1("a b c".split(), "a b c".split()) == 100.0
    assert bleu1("a b".split(), "c d".split()) == 0.0
    assert bleu1("a b c d".split(), "a b x y".split()) == 50.0
    assert bleu1([], ["a"]) == 0.0
    with pytest.raises(ValueError):
        bleu1(["a"], [])


def test_bleu1_clipping_and_brevity():
    # "a a a" vs "a b c d": clipped overlap 1/3, BP exp(1 - 4/3)
    assert bleu1("a a a".split(), "a b c d".split()) == pytest.approx(
        100 / 3 * math.exp(1 - 4 / 3), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=8),
       st.lists(st.integers(0, 6), min_size=1, max_size=8), st.permutations(range(7)))
def test_bleu1_relabel_invariant_and_bounded(h, r, perm):
    score = bleu1(h, r)
    assert 0.0 <= score <= 100.0
    assert bleu1([perm[t] for t in h], [perm[t] for t in r]) == pytest.approx(score, abs=1e-12)


def test_repeated_ngram_rate_examples():
    assert repeated_ngram_rate("a b c d e f".split()) == 0.0
    assert repeated_ngram_rate("a b c d a b c d".split()) == pytest.approx(0.2)
    assert repeated_ngram_rate("a b c".split()) == 0.0
    # windows: aaaa x5, the last four repeat the first
    assert repeated_ngram_rate(["a"] * 8) == pytest.approx(4 / 5)
    assert repeated_ngram_rate("a b a b a".split(), n=2) == pytest.approx(2 / 4)
    with pytest.raises(ValueError):
        repeated_ngram_rate(["a"], n=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=12), st.integers(1, 4))
def test_repeated_ngram_rate_by_direct_count(tokens, n):
    windows = [tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)]
    repeats = sum(1 for i, w in enumerate(windows) if w in windows[:i])
    expected = repeats / len(windows) if windows else 0.0
    assert repeated_ngram_rate(tokens, n) == pytest.approx(expected)
    assert 0.0 <= expected <= 1.0


def test_distinct_n_examples():
    assert distinct_n([["a"] * 4], 1) == 0.25
    assert distinct_n([["a", "b", "c"]], 1) == 1.0
    one = distinct_n([["a", "b", "c"]], 1)
    assert distinct_n([["a", "b", "c"], ["a", "b", "c"]], 1) == one / 2
    assert distinct_n([["a", "b", "a", "b"]], 2) == pytest.approx(2 / 3)
    assert distinct_n([["a"]], 2) == 0.0


def test_preference_ties_fail(tiny_model):
    triples = [EncodedTriple((5, 6), (7, 8), ((7, 8),), f"t{i}") for i in range(5)]
    assert preference_accuracy(tiny_model, triples) == 0.0


def test_preference_needs_all_negatives(tiny_model):
    rng = np.random.default_rng(0)
    triples = random_triples(20, rng, n_neg=3)
    d_pos, d_neg = representation_distances(tiny_model, triples)
    expected = np.mean([dp < dn.min() for dp, dn in zip(d_pos, d_neg)])
    assert preference_accuracy(tiny_model, triples) == expected
    assert all(dn.shape == (3,) for dn in d_neg)


def test_preference_invariant_to_positive_rescaling(tiny_model):
    triples = random_triples(30, np.random.default_rng(1))
    before = representation_distances(tiny_model, triples)
    tiny_model.params["g.w"].data *= 7.5
    after = representation_distances(tiny_model, triples)
    np.testing.assert_allclose(before[0], after[0], atol=1e-6)
    assert preference_accuracy(tiny_model, triples) == np.mean(
        [dp < dn.min() for dp, dn in zip(*before)])


def test_distances_chunking_is_transparent(tiny_model):
    triples = random_triples(10, np.random.default_rng(2), n_neg=2)
    a = representation_distances(tiny_model, triples, chunk=3)
    b = representation_distances(tiny_model, triples, chunk=64)
    np.testing.assert_allclose(a[0], b[0], atol=1e-6)


def test_eval_errors(tiny_model):
    with pytest.raises(ValueError):
        preference_accuracy(tiny_model, [])
    with pytest.raises(ValueError):
        preference_accuracy(tiny_model, [EncodedTriple((5,), (6,), (), "x")])


def test_evaluate_report(tiny_model, tmp_path):
    vocab = D.Vocab([f"w{i}" for i in range(15)])
    triples = random_triples(6, np.random.default_rng(3), n_neg=2)
    report = evaluate(tiny_model, vocab, triples, DecodeConfig(k=5, max_len=8))
    agg = report.aggregate
    assert agg["n"] == 6
    assert 0 <= agg["bleu1"] <= 100
    for key in ("distinct_1", "distinct_2", "repeated4_rate", "preference_accuracy"):
        assert 0.0 <= agg[key] <= 1.0
    ex = report.examples[0]
    assert {"context", "reference", "hypothesis", "bleu1", "repeated4_rate"} <= set(ex)
    report.write_jsonl(tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 7 and json.loads(lines[-1])["aggregate"]["n"] == 6
    assert "preference_accuracy" in report.summary()
