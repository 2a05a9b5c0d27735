"""Automatic metrics and the representation-level preference probe."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import EncodedTriple, Vocab
from .decoding import DecodeConfig, greedy_decode_batch, strip_eos
from .losses import cosine_distance, decode_anchors, repeated_ngram_positions


def bleu1(hypothesis: Sequence, reference: Sequence) -> float:
    """Clipped unigram precision times brevity penalty, on a 0-100 scale."""
    if not reference:
        raise ValueError("bleu1 needs a nonempty reference")
    if not hypothesis:
        return 0.0
    ref_counts = Counter(reference)
    overlap = sum(min(n, ref_counts[tok]) for tok, n in Counter(hypothesis).items())
    precision = overlap / len(hypothesis)
    c, r = len(hypothesis), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * precision * bp


def repeated_ngram_rate(tokens: Sequence, n: int = 4) -> float:
    """Share of n-gram windows whose n-gram already occurred earlier in the sequence."""
    if n < 1:
        raise ValueError("n must be >= 1")
    windows = len(tokens) - n + 1
    if windows <= 0:
        return 0.0
    return len(repeated_ngram_positions(list(tokens), n)) / windows


def distinct_n(corpus: Sequence[Sequence], n: int) -> float:
    grams = [tuple(seq[i: i + n]) for seq in corpus for i in range(len(seq) - n + 1)]
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


def representation_distances(model, triples: Sequence[EncodedTriple],
                             decode_cfg: DecodeConfig | None = None, chunk: int = 64,
                             anchors: Sequence[Sequence[int]] | None = None):
    """Per triple: ``d(anchor, pos)`` and the array of ``d(anchor, neg_j)``."""
    if not triples:
        raise ValueError("empty dataset")
    d_pos_all: list[float] = []
    d_neg_all: list[np.ndarray] = []
    model.eval()
    with ad.no_grad():
        for start in range(0, len(triples), chunk):
            part = triples[start: start + chunk]
            xs = [t.context for t in part]
            if anchors is None:
                chunk_anchors = decode_anchors(model, xs, decode_cfg)
            else:
                chunk_anchors = [list(a) for a in anchors[start: start + chunk]]
            memory, mem_mask = model.encode_texts(xs)
            rows, seqs = [], []
            for i, t in enumerate(part):
                if not t.negatives:
                    raise ValueError(f"triple {t.source_id!r} has no negatives")
                for s in (chunk_anchors[i], t.positive, *t.negatives):
                    rows.append(i)
                    seqs.append(list(s))
            rows = np.asarray(rows)
            reps = model.represent_batch(ad.Tensor(memory.data[rows], dtype=memory.dtype),
                                         mem_mask[rows], seqs).data
            off = 0
            for t in part:
                k = 2 + len(t.negatives)
                block = ad.Tensor(reps[off: off + k], dtype=reps.dtype)
                anchor = ad.Tensor(np.broadcast_to(reps[off], (k - 1, reps.shape[1])).copy(),
                                   dtype=reps.dtype)
                d = cosine_distance(anchor, block[1:]).data
                d_pos_all.append(float(d[0]))
                d_neg_all.append(d[1:].astype(np.float64))
                off += k
    return np.asarray(d_pos_all), d_neg_all


def preference_accuracy(model, triples: Sequence[EncodedTriple],
                        decode_cfg: DecodeConfig | None = None) -> float:
    """Share of triples whose anchor is strictly closer to the positive than to every negative."""
    d_pos, d_neg = representation_distances(model, triples, decode_cfg)
    return float(np.mean([dp < dn.min() for dp, dn in zip(d_pos, d_neg)]))


@dataclass
class EvalReport:
    examples: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for ex in self.examples:
                fh.write(json.dumps(ex, ensure_ascii=False) + "\n")
            fh.write(json.dumps({"aggregate": self.aggregate}) + "\n")

    def summary(self) -> str:
        width = max(len(k) for k in self.aggregate)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
        for k, v in self.aggregate.items():
            lines.append(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
        return "\n".join(lines)


def evaluate(model, vocab: Vocab, triples: Sequence[EncodedTriple],
             decode_cfg: DecodeConfig | None = None, n: int = 4) -> EvalReport:
    """Decode every context, score against the positive, and run the preference probe."""
    if not triples:
        raise ValueError("empty dataset")
    decode_cfg = decode_cfg or DecodeConfig(k=5.0, max_len=model.config.max_len - 2)
    hyps = []
    for start in range(0, len(triples), 64):
        part = triples[start: start + 64]
        hyps += [strip_eos(h) for h in greedy_decode_batch(model, [t.context for t in part],
                                                            decode_cfg)]
    anchors = [h or [decode_cfg.eos_id] for h in hyps]
    d_pos, d_neg = representation_distances(model, triples, decode_cfg, anchors=anchors)
    report = EvalReport()
    for t, h, dp, dn in zip(triples, hyps, d_pos, d_neg):
        report.examples.append({
            "source_id": t.source_id,
            "context": vocab.detokenize(t.context),
            "reference": vocab.detokenize(t.positive),
            "hypothesis": vocab.detokenize(h),
            "bleu1": bleu1(h, list(t.positive)),
            f"repeated{n}_rate": repeated_ngram_rate(h, n),
            "d_pos": float(dp),
            "d_neg_min": float(dn.min()),
            "preferred": bool(dp < dn.min()),
        })
    ex = report.examples
    report.aggregate = {
        "n": len(ex),
        "bleu1": float(np.mean([e["bleu1"] for e in ex])),
        "distinct_1": distinct_n(hyps, 1),
        "distinct_2": distinct_n(hyps, 2),
        f"repeated{n}_rate": float(np.mean([e[f"repeated{n}_rate"] for e in ex])),
        "preference_accuracy": float(np.mean([e["preferred"] for e in ex])),
    }
    return report
