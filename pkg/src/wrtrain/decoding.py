"""Greedy decoding with a duplication-count penalty.

At each step the next-token distribution ``p`` is rescaled to
``p / (1 + k * count)``, where ``count`` is how often the token has already
been emitted in this continuation, and the argmax is taken. Scores are not
renormalised; argmax does not need it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import BOS_ID, CLS_ID, EOS_ID, PAD_ID, SPECIAL_IDS, UNK_ID

# never emitted by the decoder; EOS stays available as the stop symbol
BARRED_IDS = (PAD_ID, BOS_ID, CLS_ID, UNK_ID)


@dataclass(frozen=True)
class DecodeConfig:
    k: float = 5.0
    max_len: int = 20
    eos_id: int = EOS_ID
    # False bars EOS as well, so every continuation runs to max_len
    stop_at_eos: bool = True

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"penalty k must be >= 0, got {self.k}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def penalize(p: np.ndarray, counts: np.ndarray, k: float) -> np.ndarray:
    """Duplication-penalised scores ``p / (1 + k * counts)``; works row-wise on 2-d input."""
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return np.asarray(p).copy()
    return p / (1.0 + k * counts)


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_decode_batch(model, contexts: Sequence[Sequence[int]],
                        cfg: DecodeConfig) -> list[list[int]]:
    """Decode every context in one batch; each output ends with EOS only if it was chosen."""
    if cfg.max_len < 1:
        raise ValueError("max_len must be >= 1")
    if cfg.max_len >= model.config.max_len:
        raise ValueError(f"decode max_len={cfg.max_len} needs model max_len > {cfg.max_len}")
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            memory, mem_mask = model.encode_texts(contexts)
            B = len(contexts)
            V = model.config.vocab_size
            counts = np.zeros((B, V), dtype=np.int64)
            outputs: list[list[int]] = [[] for _ in range(B)]
            alive = np.ones(B, dtype=bool)
            prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
            special = np.array(sorted(SPECIAL_IDS))
            barred = np.array(BARRED_IDS if cfg.stop_at_eos else BARRED_IDS + (cfg.eos_id,))
            for _ in range(cfg.max_len):
                rows = np.flatnonzero(alive)
                logits = model.logits_batch(
                    _take(memory, rows), mem_mask[rows], prefix[rows],
                    np.ones((len(rows), prefix.shape[1]), dtype=bool))
                probs = _softmax64(logits.data[:, -1, :])
                scores = penalize(probs, counts[rows], cfg.k)
                scores[:, barred] = -1.0
                nxt = np.argmax(scores, axis=-1)  # first max wins: lowest id tie-break
                step = np.full(B, PAD_ID, dtype=np.int64)
                step[rows] = nxt
                for r, tok in zip(rows, nxt):
                    outputs[r].append(int(tok))
                    if tok == cfg.eos_id:
                        alive[r] = False
                    elif tok not in special:
                        counts[r, tok] += 1
                prefix = np.concatenate([prefix, step[:, None]], axis=1)
                if not alive.any():
                    break
            return outputs
    finally:
        if was_training:
            model.train(model.rng)


def _take(memory: ad.Tensor, rows: np.ndarray) -> ad.Tensor:
    if len(rows) == memory.shape[0]:
        return memory
    return ad.Tensor(memory.data[rows], dtype=memory.dtype)


def greedy_decode(model, x_tokens: Sequence[int], cfg: DecodeConfig) -> list[int]:
    return greedy_decode_batch(model, [list(x_tokens)], cfg)[0]


def strip_eos(tokens: Sequence[int], eos_id: int = EOS_ID) -> list[int]:
    out = list(tokens)
    if out and out[-1] == eos_id:
        out.pop()
    return out
