"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"WRCK" | u32 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    u32 n_tensors
    n_tensors x ( u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | raw data )
    32-byte SHA-256 of everything above

The header carries the model config, training config, step, stage, RNG state
and optionally the vocab. Tensors are named ``param/<name>``,
``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, Seq2SeqTransformer

MAGIC = b"WRCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    stage: str = "init"
    train_config: dict | None = None
    optimizer: dict | None = None  # {"t": int, "m": {...}, "v": {...}}
    rng_state: dict | None = None
    vocab: list[str] | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Seq2SeqTransformer, **kw) -> "Checkpoint":
        return cls(model.config, model.state_dict(), **kw)

    def build_model(self, dtype=None) -> Seq2SeqTransformer:
        dtype = dtype or next(iter(self.params.values())).dtype
        model = Seq2SeqTransformer(self.model_config, dtype=dtype)
        model.load_state_dict(self.params)
        return model

    def check_compatible(self, config: ModelConfig) -> None:
        if config != self.model_config:
            diff = {k: (v, getattr(config, k)) for k, v in self.model_config.to_dict().items()
                    if getattr(config, k) != v}
            raise CheckpointError(f"checkpoint/model config mismatch (checkpoint, expected): {diff}")


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_DTYPES[code], copy=False).tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "step": int(ckpt.step),
        "stage": ckpt.stage,
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "optimizer_t": None if ckpt.optimizer is None else int(ckpt.optimizer["t"]),
        "vocab": ckpt.vocab,
        "extra": ckpt.extra,
    }
    raw_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    if ckpt.optimizer is not None:
        tensors += [(f"adam_m/{k}", v) for k, v in ckpt.optimizer["m"].items()]
        tensors += [(f"adam_v/{k}", v) for k, v in ckpt.optimizer["v"].items()]
    body = MAGIC + struct.pack("<II", VERSION, len(raw_header)) + raw_header
    body += struct.pack("<I", len(tensors)) + b"".join(_pack_tensor(n, a) for n, a in tensors)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 44 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    version, header_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    off = 12
    header = json.loads(body[off: off + header_len].decode("utf-8"))
    off += header_len
    (n,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off: off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off)
        tensors[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
        off += nbytes
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    optimizer = None
    if header["optimizer_t"] is not None:
        optimizer = {"t": header["optimizer_t"], "m": group("adam_m/"), "v": group("adam_v/")}
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=group("param/"),
        step=header["step"],
        stage=header["stage"],
        train_config=header["train_config"],
        optimizer=optimizer,
        rng_state=header["rng_state"],
        vocab=header["vocab"],
        extra=header["extra"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    ckpt = from_bytes(blob)
    if expect_config is not None:
        ckpt.check_compatible(expect_config)
    return ckpt
