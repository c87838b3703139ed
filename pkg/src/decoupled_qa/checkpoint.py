"""Binary checkpoint format (little-endian).

::

    "DTMW" | version u16 | kind u8 (0 standard, 1 decoupled)
    | n_layers d n_heads ffn vocab_size max_positions n_segments   (u32 each)
    | dropout attention_dropout                  (u32 holding float32 bits)
    | [decoupled only] x u8 | y u8 | c u32 (0 = no compression pair)
    | block count u32
    | blocks: name_len u16, name utf-8, rank u8, extents u32 * rank, f32 values
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .decoupled import CompressionPair, DecoupledModel, SplitSpec
from .errors import DataError
from .transformer import ModelConfig, StandardModel

MAGIC = b"DTMW"
VERSION = 1
_INT_FIELDS = ("n_layers", "d", "n_heads", "ffn", "vocab_size", "max_positions", "n_segments")


def _f32_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def _bits_f32(b: int) -> float:
    return float(np.float32(struct.unpack("<f", struct.pack("<I", b))[0]))


def to_bytes(model: nn.Module) -> bytes:
    cfg: ModelConfig = model.config
    buf = io.BytesIO()
    kind = 1 if isinstance(model, DecoupledModel) else 0
    buf.write(MAGIC + struct.pack("<HB", VERSION, kind))
    buf.write(struct.pack("<7I", *(getattr(cfg, f) for f in _INT_FIELDS)))
    buf.write(struct.pack("<2I", _f32_bits(cfg.dropout), _f32_bits(cfg.attention_dropout)))
    if kind:
        c = 0 if model.compression is None else model.compression.c
        buf.write(struct.pack("<BBI", model.split.x, model.split.y, c))
    params = list(model.state_dict().items())
    buf.write(struct.pack("<I", len(params)))
    for name, t in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def model_hash(model: nn.Module) -> int:
    """u64 fingerprint of the serialized checkpoint."""
    return int.from_bytes(hashlib.sha256(to_bytes(model)).digest()[:8], "little")


def save(model: nn.Module, path: str | os.PathLike) -> None:
    Path(path).write_bytes(to_bytes(model))


def from_bytes(data: bytes) -> StandardModel | DecoupledModel:
    view = memoryview(data)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise DataError("checkpoint truncated")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != MAGIC:
        raise DataError("not a model checkpoint (bad magic)")
    pos = 4
    version, kind = take("<HB")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    ints = dict(zip(_INT_FIELDS, take("<7I")))
    drop, adrop = take("<2I")
    cfg = ModelConfig(**ints, dropout=_bits_f32(drop), attention_dropout=_bits_f32(adrop))
    if kind == 1:
        x, y, c = take("<BBI")
        model = DecoupledModel(cfg, SplitSpec(x, y))
        if c:
            model.compression = CompressionPair(cfg.d, c)
    elif kind == 0:
        model = StandardModel(cfg)
    else:
        raise DataError(f"unknown checkpoint kind {kind}")
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (n,) = take("<H")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = take("<B")
        shape = take(f"<{rank}I") if rank else ()
        numel = int(np.prod(shape)) if rank else 1
        if pos + 4 * numel > len(view):
            raise DataError("checkpoint truncated")
        arr = np.frombuffer(view, dtype="<f4", count=numel, offset=pos).reshape(shape)
        pos += 4 * numel
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise DataError("trailing bytes after checkpoint blocks")
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise DataError(f"checkpoint blocks do not match the header config: {e}") from None
    return model


def load(path: str | os.PathLike) -> StandardModel | DecoupledModel:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())
