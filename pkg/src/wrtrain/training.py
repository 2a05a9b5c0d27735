"""Two-stage training: MLE pretraining, then WR or unlikelihood fine-tuning.

Batch order is a pure function of ``(seed, step)``: step ``s`` falls in epoch
``s // steps_per_epoch`` whose permutation comes from ``default_rng([seed,
epoch])``. Per-epoch negative choices use ``default_rng([seed, epoch, 1])``.
Only the dropout generator carries state, and it is saved in checkpoints, so
a resumed run replays the uninterrupted one exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError, save_checkpoint
from .data import EncodedPair, EncodedTriple
from .decoding import DecodeConfig
from .losses import (WRLossConfig, cross_entropy, decode_anchors, negative_only_tokens,
                     teacher_forcing_arrays, ul_loss, ul_loss_negative_tokens,
                     wr_loss_with_negatives)
from .model import ModelConfig, Seq2SeqTransformer
from .optim import Adam, clip_grad_norm

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "wr", "ul")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    lam: float = 1.0
    ul_n: int = 4
    ul_weight: float = 1.0
    ul_candidates: str = "repeat"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    decode_k: float = 5.0
    ul_decode_k: float = 0.0
    ul_fixed_length: bool = False
    decode_max_len: int | None = None
    precision: int = 32
    log_every: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.stage == "wr" and self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.stage == "ul":
            if self.ul_n < 1:
                raise ValueError("ul_n must be >= 1")
            if self.ul_candidates not in ("repeat", "negative"):
                raise ValueError("ul_candidates must be 'repeat' or 'negative'")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)


def batch_indices(n_items: int, batch_size: int, seed: int, step: int) -> tuple[int, np.ndarray]:
    """``(epoch, item indices)`` for a global step."""
    per_epoch = math.ceil(n_items / batch_size)
    epoch, i = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    return epoch, perm[i * batch_size: (i + 1) * batch_size]


def epoch_negatives(triples: Sequence[EncodedTriple], seed: int, epoch: int) -> list[int]:
    """Which negative of each triple is used during ``epoch``."""
    rng = np.random.default_rng([seed, epoch, 1])
    return [int(rng.integers(len(t.negatives))) for t in triples]


class _Run:
    def __init__(self, cfg: TrainConfig, data: Sequence, model: Seq2SeqTransformer,
                 optimizer: Adam, rng: np.random.Generator, vocab: list[str] | None):
        self.cfg = cfg
        self.data = data
        self.model = model
        self.opt = optimizer
        self.rng = rng
        self.vocab = vocab
        self._neg_cache: tuple[int, list[int]] | None = None
        self.decode_max_len = cfg.decode_max_len or model.config.max_len - 2

    def loss(self, epoch: int, idx: np.ndarray, items: Sequence) -> tuple[ad.Tensor, dict]:
        stage = self.cfg.stage
        if stage == "pretrain":
            memory, mask = self.model.encode_texts([p.context for p in items])
            y_in, y_out, y_mask = teacher_forcing_arrays([p.continuation for p in items])
            ce = cross_entropy(self.model.logits_batch(memory, mask, y_in, y_mask), y_out, y_mask)
            return ce, {"total": ce.item(), "ce": ce.item()}
        if stage == "wr":
            return self._wr_loss(epoch, idx, items)
        return self._ul_loss(items)

    def _wr_loss(self, epoch, idx, items):
        if self._neg_cache is None or self._neg_cache[0] != epoch:
            self._neg_cache = (epoch, epoch_negatives(self.data, self.cfg.seed, epoch))
        choice = self._neg_cache[1]
        negatives = [t.negatives[choice[i]] for i, t in zip(idx, items)]
        breakdown = wr_loss_with_negatives(
            self.model, items, negatives, WRLossConfig(lam=self.cfg.lam),
            DecodeConfig(k=self.cfg.decode_k, max_len=self.decode_max_len))
        return breakdown.total, breakdown.as_dict()

    def _ul_loss(self, items):
        xs = [t.context for t in items]
        memory, mask = self.model.encode_texts(xs)
        y_in, y_out, y_mask = teacher_forcing_arrays([t.positive for t in items])
        logits = self.model.logits_batch(memory, mask, y_in, y_mask)
        ce = cross_entropy(logits, y_out, y_mask)
        if self.cfg.ul_candidates == "negative":
            cands = [negative_only_tokens(t.positive, t.negatives) for t in items]
            ul = ul_loss_negative_tokens(logits, cands, y_mask)
        else:
            decoded = decode_anchors(self.model, xs,
                                     DecodeConfig(k=self.cfg.ul_decode_k, max_len=self.decode_max_len,
                                                  stop_at_eos=not self.cfg.ul_fixed_length))
            d_in, d_out, d_mask = teacher_forcing_arrays(decoded)
            ul = ul_loss(self.model.logits_batch(memory, mask, d_in, d_mask), d_out,
                         self.cfg.ul_n, d_mask)
        total = ce + ul * self.cfg.ul_weight
        return total, {"total": total.item(), "ce": ce.item(), "ul": ul.item()}

    def step(self, step: int) -> dict:
        epoch, idx = batch_indices(len(self.data), self.cfg.batch_size, self.cfg.seed, step)
        items = [self.data[i] for i in idx]
        self.model.train(self.rng)
        self.opt.zero_grad()
        try:
            loss, record = self.loss(epoch, idx, items)
            if not all(math.isfinite(v) for v in record.values()):
                raise ad.NonFiniteError("loss")
            ad.backward(loss)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise TrainingError(f"step {step}: {exc}; batch item ids {idx.tolist()}") from exc
        finally:
            self.model.eval()
        params = self.model.parameters()
        record["grad_norm"] = clip_grad_norm(params, self.cfg.grad_clip)
        self.opt.step()
        return record

    def checkpoint(self, step: int) -> Checkpoint:
        return Checkpoint(self.model.config, self.model.state_dict(), step=step,
                          stage=self.cfg.stage, train_config=self.cfg.to_dict(),
                          optimizer=self.opt.state_dict(),
                          rng_state=self.rng.bit_generator.state, vocab=self.vocab)


def _train(cfg: TrainConfig, data: Sequence, model: Seq2SeqTransformer, optimizer: Adam,
           rng: np.random.Generator, start_step: int, vocab: list[str] | None,
           out_dir: str | Path | None, log_path: str | Path | None,
           on_step: Callable[[dict], None] | None) -> TrainResult:
    if not data:
        raise ValueError("empty training set")
    run = _Run(cfg, data, model, optimizer, rng, vocab)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    start = time.perf_counter()
    try:
        for step in range(start_step, cfg.max_steps):
            record = {"step": step + 1, "stage": cfg.stage, **run.step(step),
                      "wall_time": time.perf_counter() - start}
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if on_step is not None:
                on_step(record)
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                logger.info("%s step %d/%d %s", cfg.stage, step + 1, cfg.max_steps,
                            " ".join(f"{k}={v:.4f}" for k, v in record.items()
                                     if isinstance(v, float) and k != "wall_time"))
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(run.checkpoint(step + 1), out_dir / f"{cfg.stage}-step{step + 1:06d}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt = run.checkpoint(max(cfg.max_steps, start_step))
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / f"{cfg.stage}.ckpt")
    return TrainResult(ckpt, log)


def _fresh(cfg: TrainConfig, model: Seq2SeqTransformer):
    return Adam(model.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps), np.random.default_rng(cfg.seed)


def _expect_stage(cfg: TrainConfig, stage: str) -> None:
    if cfg.stage != stage:
        raise ValueError(f"config stage {cfg.stage!r} does not match {stage!r}")


def pretrain(cfg: TrainConfig, pairs: Sequence[EncodedPair], model: Seq2SeqTransformer | None = None,
             model_config: ModelConfig | None = None, vocab: list[str] | None = None,
             out_dir=None, log_path=None, on_step=None) -> TrainResult:
    """CE-only training on (sentence, next sentence) pairs."""
    _expect_stage(cfg, "pretrain")
    if model is None:
        if model_config is None:
            raise ValueError("pretrain needs a model or a model_config")
        model = Seq2SeqTransformer(model_config, dtype=cfg.dtype)
    opt, rng = _fresh(cfg, model)
    return _train(cfg, pairs, model, opt, rng, 0, vocab, out_dir, log_path, on_step)


def _finetune(stage: str, cfg: TrainConfig, triples: Sequence[EncodedTriple], base: Checkpoint,
              model_config: ModelConfig | None, **kw) -> TrainResult:
    _expect_stage(cfg, stage)
    if model_config is not None:
        base.check_compatible(model_config)
    if stage == "wr" or cfg.ul_candidates == "negative":
        bad = [t.source_id for t in triples if not t.negatives]
        if bad:
            raise ValueError(f"{len(bad)} triples lack negatives, e.g. {bad[0]!r}")
    model = base.build_model(cfg.dtype)
    opt, rng = _fresh(cfg, model)
    kw.setdefault("vocab", base.vocab)
    return _train(cfg, triples, model, opt, rng, 0, kw.pop("vocab"), kw.pop("out_dir", None),
                  kw.pop("log_path", None), kw.pop("on_step", None))


def finetune_wr(cfg: TrainConfig, triples: Sequence[EncodedTriple], base: Checkpoint,
                model_config: ModelConfig | None = None, **kw) -> TrainResult:
    """Fine-tune with ``lambda * CE + cosine triplet`` starting from ``base``."""
    return _finetune("wr", cfg, triples, base, model_config, **kw)


def finetune_ul(cfg: TrainConfig, triples: Sequence[EncodedTriple], base: Checkpoint,
                model_config: ModelConfig | None = None, **kw) -> TrainResult:
    """Fine-tune with CE plus unlikelihood on repeated n-grams of greedy decodes."""
    return _finetune("ul", cfg, triples, base, model_config, **kw)


def resume(ckpt: Checkpoint, data: Sequence, max_steps: int | None = None, out_dir=None,
           log_path=None, on_step=None) -> TrainResult:
    """Continue the run stored in ``ckpt`` up to ``max_steps`` (default: its config's)."""
    if ckpt.train_config is None or ckpt.optimizer is None or ckpt.rng_state is None:
        raise CheckpointError("checkpoint carries no training state to resume from")
    cfg = TrainConfig.from_dict(ckpt.train_config)
    if max_steps is not None:
        cfg.max_steps = max_steps
    model = ckpt.build_model(cfg.dtype)
    opt = Adam(model.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    opt.load_state_dict(ckpt.optimizer)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return _train(cfg, data, model, opt, rng, ckpt.step, ckpt.vocab, out_dir, log_path, on_step)


def strip_timing(log: Sequence[dict]) -> list[dict]:
    """Log records without wall-clock fields, for run-to-run comparison."""
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in log]
