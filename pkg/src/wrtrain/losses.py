"""Training objectives: token cross-entropy, cosine triplet, WR and unlikelihood losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS_ID, EOS_ID, PAD_ID, EncodedTriple, pad_batch
from .decoding import DecodeConfig, greedy_decode_batch, strip_eos

UL_PROB_CAP = 1.0 - 1e-7


class ZeroNormError(ValueError):
    pass


@dataclass(frozen=True)
class WRLossConfig:
    lam: float = 1.0
    margin: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.margin != 1.0:
            raise ValueError("the triplet margin is fixed at 1.0")


@dataclass
class LossBreakdown:
    total: Tensor
    ce: Tensor
    triplet: Tensor
    d_pos: float
    d_neg: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "ce": self.ce.item(),
                "triplet": self.triplet.item(), "d_pos": self.d_pos, "d_neg": self.d_neg}


def _batched(logits: Tensor, targets, mask):
    targets = np.asarray(targets)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = targets[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if targets.shape != logits.shape[:-1]:
        raise ad.ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return logits, targets, mask


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token NLL per sequence over positions where ``mask`` is True, averaged over the batch.

    Accepts ``[T, V]`` logits with ``[T]`` targets or the batched ``[B, T, V]`` form.
    """
    logits, targets, mask = _batched(logits, targets, mask)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("cross_entropy: a target sequence is entirely padding")
    weights = mask / counts[:, None] / len(counts)
    nll = -ad.pick(ad.log_softmax(logits, axis=-1), targets)
    return ad.sum(nll * weights.astype(logits.dtype))


def cosine_distance(x: Tensor, y: Tensor) -> Tensor:
    """``(|x||y| - x.y) / (2|x||y|)`` along the last axis, i.e. ``(1 - cos) / 2``."""
    xx = ad.sum(x * x, axis=-1)
    yy = ad.sum(y * y, axis=-1)
    if np.any(xx.data <= 0) or np.any(yy.data <= 0):
        raise ZeroNormError("cosine distance of a zero-norm vector")
    norms = ad.sqrt(xx) * ad.sqrt(yy)
    d = (norms - ad.sum(x * y, axis=-1)) / (norms * 2.0)
    # rounding can leave d a hair outside [0, 1]
    return ad.clip(d, 0.0, 1.0)


def triplet_cos(a: Tensor, pos: Tensor, neg: Tensor, margin: float = 1.0) -> Tensor:
    """``max(0, margin + d(a, pos) - d(a, neg))`` per row (scalar for 1-d inputs)."""
    return ad.relu(cosine_distance(a, pos) - cosine_distance(a, neg) + margin)


def teacher_forcing_arrays(ys: Sequence[Sequence[int]]):
    """Decoder inputs ``[BOS] + y``, targets ``y + [EOS]`` and the shared mask."""
    y_in, mask = pad_batch([[BOS_ID, *y] for y in ys], PAD_ID)
    y_out, _ = pad_batch([[*y, EOS_ID] for y in ys], PAD_ID)
    return y_in, y_out, mask


def sample_negatives(triples: Sequence[EncodedTriple], rng: np.random.Generator) -> list[tuple[int, ...]]:
    out = []
    for t in triples:
        if not t.negatives:
            raise ValueError(f"triple {t.source_id!r} has no negatives")
        out.append(t.negatives[int(rng.integers(len(t.negatives)))])
    return out


def wr_loss(model, triples: EncodedTriple | Sequence[EncodedTriple], rng: np.random.Generator,
            cfg: WRLossConfig = WRLossConfig(),
            decode_cfg: DecodeConfig | None = None) -> LossBreakdown:
    """WR objective on one triple or a batch, with one negative per triple drawn from ``rng``."""
    if isinstance(triples, EncodedTriple):
        triples = [triples]
    return wr_loss_with_negatives(model, triples, sample_negatives(triples, rng), cfg, decode_cfg)


def default_decode_config(model) -> DecodeConfig:
    return DecodeConfig(k=5.0, max_len=model.config.max_len - 2)


def wr_loss_with_negatives(model, triples: Sequence[EncodedTriple],
                           negatives: Sequence[Sequence[int]], cfg: WRLossConfig = WRLossConfig(),
                           decode_cfg: DecodeConfig | None = None,
                           anchors: Sequence[Sequence[int]] | None = None) -> LossBreakdown:
    """WR objective for fixed negatives.

    The anchor continuation comes from penalised greedy decoding (no gradient
    through the discrete choice) unless ``anchors`` supplies it; the anchor,
    positive and negative representations are then computed with gradient and
    share one encoder pass.
    """
    if not triples:
        raise ValueError("empty batch")
    xs = [t.context for t in triples]
    pos = [list(t.positive) for t in triples]
    if anchors is None:
        anchors = decode_anchors(model, xs, decode_cfg)
    anchors = [list(a) for a in anchors]

    memory, mem_mask = model.encode_texts(xs)
    y_in, y_out, y_mask = teacher_forcing_arrays(pos)
    ce = cross_entropy(model.logits_batch(memory, mem_mask, y_in, y_mask), y_out, y_mask)

    B = len(triples)
    reps = model.represent_batch(ad.concat([memory] * 3, axis=0),
                                 np.concatenate([mem_mask] * 3, axis=0),
                                 anchors + pos + [list(n) for n in negatives])
    a, p, n = reps[:B], reps[B:2 * B], reps[2 * B:]
    d_pos = cosine_distance(a, p)
    d_neg = cosine_distance(a, n)
    triplet = ad.mean(ad.relu(d_pos - d_neg + cfg.margin))
    total = ce * cfg.lam + triplet
    return LossBreakdown(total, ce, triplet, float(d_pos.data.mean()), float(d_neg.data.mean()))


def decode_anchors(model, contexts: Sequence[Sequence[int]],
                   decode_cfg: DecodeConfig | None = None) -> list[list[int]]:
    """Greedy continuations used as triplet anchors (EOS stripped)."""
    decode_cfg = decode_cfg or default_decode_config(model)
    decoded = greedy_decode_batch(model, contexts, decode_cfg)
    # an immediate EOS still leaves something to represent
    return [strip_eos(d) or [EOS_ID] for d in decoded]


def repeated_ngram_positions(tokens: Sequence[int], n: int = 4) -> list[int]:
    """Indices i whose n-gram ``tokens[i-n+1 : i+1]`` already ended at an earlier index."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: set[tuple[int, ...]] = set()
    out = []
    for i in range(n - 1, len(tokens)):
        gram = tuple(tokens[i - n + 1: i + 1])
        if gram in seen:
            out.append(i)
        seen.add(gram)
    return out


def _per_sequence_mean(values: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Mean of ``values`` grouped by ``rows`` (empty groups give 0), averaged over ``n_rows``."""
    counts = np.bincount(rows, minlength=n_rows)
    weights = (1.0 / counts[rows]) / n_rows
    return ad.sum(values * weights.astype(values.dtype))


def ul_loss(logits: Tensor, y_tokens, n: int = 4, mask=None) -> Tensor:
    """Unlikelihood penalty ``-log(1 - p(y_i))`` on positions that close a repeated n-gram.

    Per sequence: the mean over penalised positions, or 0 when there are none.
    Batched input is averaged over sequences. ``p`` is capped at ``1 - 1e-7``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    logits, targets, mask = _batched(logits, y_tokens, mask)
    rows, cols = [], []
    for b in range(targets.shape[0]):
        seq = targets[b][mask[b]].tolist()
        for i in repeated_ngram_positions(seq, n):
            rows.append(b)
            cols.append(i)
    if not rows:
        return ad.tensor(0.0, dtype=logits.dtype)
    rows_a, cols_a = np.asarray(rows), np.asarray(cols)
    probs = ad.exp(ad.pick(ad.log_softmax(logits, axis=-1), targets))
    p = ad.clip(probs[rows_a, cols_a], None, UL_PROB_CAP)
    penalty = -ad.log(1.0 - p)
    return _per_sequence_mean(penalty, rows_a, targets.shape[0])


def ul_loss_negative_tokens(logits: Tensor, candidates: Sequence[Sequence[int]],
                            mask=None) -> Tensor:
    """Token-level unlikelihood against fixed candidate sets (one set per sequence).

    Each position adds ``sum_c -log(1 - p(c))``; per-sequence mean over real
    positions, then batch mean. Sequences with an empty set contribute 0.
    """
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        candidates = [candidates] if candidates and np.ndim(candidates[0]) == 0 else candidates
    B, T, _ = logits.shape
    mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)
    probs = ad.softmax(logits, axis=-1)
    terms, rows = [], []
    for b, cand in enumerate(candidates):
        cand = sorted(set(int(c) for c in cand))
        if not cand:
            continue
        t_idx = np.flatnonzero(mask[b])
        bi = np.full((len(t_idx), len(cand)), b)
        ti = np.repeat(t_idx[:, None], len(cand), axis=1)
        ci = np.tile(np.asarray(cand)[None, :], (len(t_idx), 1))
        p = ad.clip(probs[bi, ti, ci], None, UL_PROB_CAP)
        terms.append(ad.reshape(ad.sum(-ad.log(1.0 - p), axis=-1), (-1,)))
        rows.append(np.full(len(t_idx), b))
    if not terms:
        return ad.tensor(0.0, dtype=logits.dtype)
    return _per_sequence_mean(ad.concat(terms, axis=0), np.concatenate(rows), B)


def negative_only_tokens(positive: Sequence[int], negatives: Sequence[Sequence[int]]) -> list[int]:
    """Tokens present in some negative but absent from the positive."""
    pos = set(positive)
    return sorted({t for neg in negatives for t in neg} - pos)
