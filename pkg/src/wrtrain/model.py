"""Transformer encoder-decoder with a token head and a pooled representation path.

The batched methods (``*_batch``) are what training uses; ``encode``,
``decode_teacher_forced`` and ``represent`` are single-sequence conveniences
with the same semantics.

Representation pass: the decoder reads ``[CLS] + y`` with full (non-causal)
self-attention and the hidden state at the ``[CLS]`` slot is pooled, then
mapped by ``g`` (a learnable Hadamard gate or a bias-free projection). This
pass never produces training logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS_ID, CLS_ID, PAD_ID, pad_batch

G_MAPPINGS = ("hadamard", "linear_projection")
_NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 128
    max_len: int = 32
    dropout: float = 0.1
    g_mapping: str = "linear_projection"
    d_rep: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers",
                     "d_ffn", "max_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.g_mapping not in G_MAPPINGS:
            raise ValueError(f"g_mapping must be one of {G_MAPPINGS}, got {self.g_mapping!r}")
        if self.d_rep is not None:
            if self.g_mapping == "hadamard" and self.d_rep != self.d_model:
                raise ValueError("hadamard mapping keeps d_rep == d_model")
            if self.d_rep < 1:
                raise ValueError("d_rep must be positive")

    @property
    def rep_dim(self) -> int:
        return self.d_rep or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config."""
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    ln = 2 * d
    enc = attn + ffn + 2 * ln
    dec = 2 * attn + ffn + 3 * ln
    g = d if cfg.g_mapping == "hadamard" else cfg.rep_dim * d
    return v * d + cfg.n_enc_layers * enc + cfg.n_dec_layers * dec + 2 * ln + d * v + v + g


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class Seq2SeqTransformer:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = False
        self.rng: np.random.Generator | None = None
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(config.seed))
        self._pe = sinusoidal_positions(config.max_len, config.d_model).astype(self.dtype)

    # parameters -------------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ad.parameter(value.astype(self.dtype), name=name, dtype=self.dtype)

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, f, v = c.d_model, c.d_ffn, c.vocab_size

        def glorot(fan_in, fan_out):
            a = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, size=(fan_in, fan_out))

        def attn(prefix):
            for p in ("q", "k", "v", "o"):
                self._add(f"{prefix}.w{p}", glorot(d, d))
                self._add(f"{prefix}.b{p}", np.zeros(d))

        def norm(prefix):
            self._add(f"{prefix}.gain", np.ones(d))
            self._add(f"{prefix}.bias", np.zeros(d))

        def ffn(prefix):
            self._add(f"{prefix}.w1", glorot(d, f))
            self._add(f"{prefix}.b1", np.zeros(f))
            self._add(f"{prefix}.w2", glorot(f, d))
            self._add(f"{prefix}.b2", np.zeros(d))

        # unit-variance token vectors, comparable in scale to the positional signal
        self._add("embed", rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=(v, d)))
        for layer in range(c.n_enc_layers):
            p = f"enc.{layer}"
            norm(f"{p}.ln1")
            attn(f"{p}.self")
            norm(f"{p}.ln2")
            ffn(f"{p}.ffn")
        norm("enc.ln_f")
        for layer in range(c.n_dec_layers):
            p = f"dec.{layer}"
            norm(f"{p}.ln1")
            attn(f"{p}.self")
            norm(f"{p}.ln2")
            attn(f"{p}.cross")
            norm(f"{p}.ln3")
            ffn(f"{p}.ffn")
        norm("dec.ln_f")
        self._add("head.w", glorot(d, v))
        self._add("head.b", np.zeros(v))
        if c.g_mapping == "hadamard":
            self._add("g.w", np.ones(d))
        else:
            self._add("g.w", glorot(d, c.rep_dim))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=self.dtype)

    def astype(self, dtype) -> "Seq2SeqTransformer":
        clone = Seq2SeqTransformer.__new__(Seq2SeqTransformer)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.training = False
        clone.rng = None
        clone.params = {k: ad.parameter(p.data.astype(dtype), name=k, dtype=dtype)
                        for k, p in self.params.items()}
        clone._pe = sinusoidal_positions(self.config.max_len, self.config.d_model).astype(dtype)
        return clone

    def train(self, rng: np.random.Generator | None = None) -> None:
        self.training = True
        self.rng = rng

    def eval(self) -> None:
        self.training = False

    # building blocks ----------------------------------------------------------

    def _linear(self, x: Tensor, w: str, b: str | None = None) -> Tensor:
        out = x @ self.params[w]
        return out + self.params[b] if b is not None else out

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"], 1e-5)

    def _drop(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.config.dropout, self.rng, self.training)

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, blocked: np.ndarray) -> Tensor:
        c = self.config
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        h = c.n_heads
        dh = d // h

        def heads(x, name, T):
            return self._linear(x, f"{prefix}.w{name}", f"{prefix}.b{name}") \
                .reshape(B, T, h, dh).transpose(0, 2, 1, 3)

        q = heads(xq, "q", Tq)
        k = heads(xkv, "k", Tk)
        v = heads(xkv, "v", Tk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        scores = ad.masked_fill(scores, blocked, _NEG_INF)
        weights = self._drop(ad.softmax(scores, axis=-1))
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self._linear(ctx, f"{prefix}.wo", f"{prefix}.bo")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        hidden = ad.relu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._linear(self._drop(hidden), f"{prefix}.w2", f"{prefix}.b2")

    def _embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len={self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        x = ad.embedding(self.params["embed"], ids) + ad.tensor(self._pe[: ids.shape[1]],
                                                                 dtype=self.dtype)
        return self._drop(x)

    # batched forward ----------------------------------------------------------

    def encode_batch(self, x_ids: np.ndarray, x_mask: np.ndarray) -> Tensor:
        """Encoder states ``[B, S, d_model]``; ``x_mask`` marks real tokens."""
        x_mask = np.asarray(x_mask, dtype=bool)
        x = self._embed(x_ids)
        blocked = ~x_mask[:, None, None, :]
        for layer in range(self.config.n_enc_layers):
            p = f"enc.{layer}"
            h = self._norm(x, f"{p}.ln1")
            x = x + self._drop(self._attention(f"{p}.self", h, h, blocked))
            x = x + self._drop(self._ffn(f"{p}.ffn", self._norm(x, f"{p}.ln2")))
        return self._norm(x, "enc.ln_f")

    def decoder_hidden(self, memory: Tensor, mem_mask: np.ndarray, y_in: np.ndarray,
                       y_mask: np.ndarray, causal: bool) -> Tensor:
        mem_mask = np.asarray(mem_mask, dtype=bool)
        y_mask = np.asarray(y_mask, dtype=bool)
        T = y_in.shape[1]
        blocked = ~y_mask[:, None, None, :]
        if causal:
            blocked = blocked | np.triu(np.ones((T, T), dtype=bool), k=1)[None, None]
        cross_blocked = ~mem_mask[:, None, None, :]
        x = self._embed(y_in)
        for layer in range(self.config.n_dec_layers):
            p = f"dec.{layer}"
            h = self._norm(x, f"{p}.ln1")
            x = x + self._drop(self._attention(f"{p}.self", h, h, blocked))
            x = x + self._drop(self._attention(f"{p}.cross", self._norm(x, f"{p}.ln2"),
                                               memory, cross_blocked))
            x = x + self._drop(self._ffn(f"{p}.ffn", self._norm(x, f"{p}.ln3")))
        return self._norm(x, "dec.ln_f")

    def logits_batch(self, memory: Tensor, mem_mask: np.ndarray, y_in: np.ndarray,
                     y_mask: np.ndarray) -> Tensor:
        """Causal decoder logits ``[B, T, vocab]`` for decoder inputs ``y_in``."""
        hidden = self.decoder_hidden(memory, mem_mask, y_in, y_mask, causal=True)
        return self._linear(hidden, "head.w", "head.b")

    def map_g(self, h: Tensor) -> Tensor:
        if self.config.g_mapping == "hadamard":
            return h * self.params["g.w"]
        return h @ self.params["g.w"]

    def represent_batch(self, memory: Tensor, mem_mask: np.ndarray,
                        ys: Sequence[Sequence[int]]) -> Tensor:
        """``g`` of the pooled ``[CLS]`` state for each ``[CLS] + y``; rows align with memory."""
        ids, mask = pad_batch([[CLS_ID, *y] for y in ys], PAD_ID)
        hidden = self.decoder_hidden(memory, mem_mask, ids, mask, causal=False)
        return self.map_g(hidden[:, 0, :])

    # single-sequence API --------------------------------------------------------

    def encode(self, x_tokens: Sequence[int]) -> Tensor:
        self._check_nonempty(x_tokens)
        ids = np.asarray([list(x_tokens)])
        return self.encode_batch(ids, np.ones_like(ids, dtype=bool))[0]

    def decode_teacher_forced(self, memory: Tensor, y_tokens: Sequence[int]) -> Tensor:
        """Logits ``[len(y), vocab]`` where row i scores y_i given y_<i and the memory."""
        self._check_nonempty(y_tokens)
        y_in = np.asarray([[BOS_ID, *list(y_tokens)[:-1]]])
        mem = memory.reshape(1, *memory.shape)
        mem_mask = np.ones((1, memory.shape[0]), dtype=bool)
        return self.logits_batch(mem, mem_mask, y_in, np.ones_like(y_in, dtype=bool))[0]

    def represent(self, x_tokens: Sequence[int], y_tokens: Sequence[int]) -> Tensor:
        self._check_nonempty(y_tokens)
        memory = self.encode(x_tokens)
        mem = memory.reshape(1, *memory.shape)
        return self.represent_batch(mem, np.ones((1, memory.shape[0]), dtype=bool),
                                    [list(y_tokens)])[0]

    @staticmethod
    def _check_nonempty(tokens: Sequence[int]) -> None:
        if len(tokens) == 0:
            raise ValueError("empty token sequence")

    def encode_texts(self, xs: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Pad and encode a list of contexts; returns ``(memory, mask)``."""
        ids, mask = pad_batch(xs, PAD_ID)
        return self.encode_batch(ids, mask), mask
