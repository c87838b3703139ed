"""Offline passage index: a random-access binary file of input-stack states.

Layout (all integers little-endian)::

    "DTCX" | version u16 = 1 | dtype u8 (0 f32, 1 f16) | reserved u8
    | model hash u64 | d u32 | c u32 | entry count u64
    | offset table: count x (id u64, offset u64)
    | entries: id u64 | token count u32 | tokens x c matrix | pooled c vector

Matrices are row-major. f16 values are IEEE-754 half precision with
round-to-nearest-even; readers widen them to f32.
"""
from __future__ import annotations

import mmap
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .checkpoint import model_hash
from .decoupled import DecoupledModel, Representation, encode_input, passage_input
from .errors import CacheFormatError, ConfigError, DataError, EntryNotFoundError

MAGIC = b"DTCX"
VERSION = 1
HEADER = struct.Struct("<4sHBBQIIQ")
OFFSET = struct.Struct("<QQ")
ENTRY = struct.Struct("<QI")
DTYPES = {"f32": (0, np.dtype("<f4")), "f16": (1, np.dtype("<f2"))}
_CODES = {code: (name, dt) for name, (code, dt) in DTYPES.items()}


def storage_estimate(n_passages, avg_tokens, dim, bytes_per_value) -> int:
    """Bytes for the token matrices alone: n * t * d * b (exact integer)."""
    vals = []
    for v in (n_passages, avg_tokens, dim, bytes_per_value):
        if isinstance(v, float):
            if not v.is_integer():
                raise ConfigError(f"storage_estimate needs whole numbers, got {v}")
            v = int(v)
        if v <= 0:
            raise ConfigError("storage_estimate arguments must be positive")
        vals.append(int(v))
    n, t, d, b = vals
    return n * t * d * b


def entry_size(tokens: int, c: int, itemsize: int) -> int:
    return ENTRY.size + (tokens * c + c) * itemsize


@dataclass
class CacheSummary:
    path: str
    entries: int
    d: int
    c: int
    dtype: str
    model_hash: int
    total_bytes: int
    payload_bytes: int  # token matrices only


def build_index(model: DecoupledModel, passages: Iterable[tuple[int, list[int]]], dtype: str,
                path: str | os.PathLike) -> CacheSummary:
    """Encode each passage alone (eval mode), compress if the model has a
    bottleneck, and write the index. A failed write leaves no file behind."""
    if dtype not in DTYPES:
        raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    code, np_dtype = DTYPES[dtype]
    passages = [(int(pid), list(toks)) for pid, toks in passages]
    seen = set()
    for pid, _ in passages:
        if pid in seen:
            raise DataError(f"duplicate passage id {pid}")
        seen.add(pid)
    d, c = model.config.d, model.bottleneck

    blobs = []
    with torch.no_grad():
        for pid, toks in passages:
            rep = encode_input(model, passage_input(toks), compress=True)
            mat = rep.matrix.numpy().astype(np_dtype)
            pooled = rep.pooled.numpy().astype(np_dtype)
            blobs.append(ENTRY.pack(pid, mat.shape[0]) + mat.tobytes() + pooled.tobytes())

    offset = HEADER.size + OFFSET.size * len(blobs)
    table = []
    for (pid, _), blob in zip(passages, blobs):
        table.append(OFFSET.pack(pid, offset))
        offset += len(blob)
    header = HEADER.pack(MAGIC, VERSION, code, 0, model_hash(model), d, c, len(blobs))

    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(b"".join(table))
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        path.unlink(missing_ok=True)
        raise DataError(f"failed writing cache {path}: {e}") from None
    payload = sum(len(toks) + 1 for _, toks in passages) * c * np_dtype.itemsize
    return CacheSummary(str(path), len(blobs), d, c, dtype, model_hash(model), offset, payload)


class CacheReader:
    """Read-only view of a cache file. Lookups go through the stored offset table."""

    def __init__(self, path: str | os.PathLike, compressed: bool | None = None):
        self.path = Path(path)
        if not self.path.exists():
            raise DataError(f"cache not found: {self.path}")
        with open(self.path, "rb") as f:
            size = os.fstat(f.fileno()).st_size
            if size < HEADER.size:
                raise CacheFormatError(f"{self.path}: truncated header")
            self._buf = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
        magic, version, code, _, self.model_hash, self.d, self.c, count = HEADER.unpack_from(self._buf, 0)
        if magic != MAGIC:
            raise CacheFormatError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise CacheFormatError(f"{self.path}: unsupported version {version}")
        if code not in _CODES:
            raise CacheFormatError(f"{self.path}: unknown dtype code {code}")
        self.dtype, self._np = _CODES[code]
        table_end = HEADER.size + OFFSET.size * count
        if table_end > size:
            raise CacheFormatError(f"{self.path}: truncated offset table")
        raw = np.frombuffer(self._buf, dtype="<u8", count=2 * count, offset=HEADER.size).reshape(count, 2)
        self.ids = [int(i) for i in raw[:, 0]]
        offsets = raw[:, 1].astype(np.int64)
        if count and (offsets[0] != table_end or np.any(np.diff(offsets) <= 0)):
            raise CacheFormatError(f"{self.path}: offset table not strictly increasing")
        self._offsets = dict(zip(self.ids, (int(o) for o in offsets)))
        if len(self._offsets) != count:
            raise CacheFormatError(f"{self.path}: duplicate ids in offset table")
        end = table_end
        if count:
            last = int(offsets[-1])
            if last + ENTRY.size > size:
                raise CacheFormatError(f"{self.path}: truncated entry")
            _, tokens = ENTRY.unpack_from(self._buf, last)
            end = last + entry_size(tokens, self.c, self._np.itemsize)
        if end != size:
            raise CacheFormatError(f"{self.path}: expected {end} bytes, file has {size}")
        self.compressed = (self.c != self.d) if compressed is None else compressed
        self._pooled: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, pid: int) -> bool:
        return pid in self._offsets

    def close(self) -> None:
        self._buf.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _entry(self, pid: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            off = self._offsets[pid]
        except KeyError:
            raise EntryNotFoundError(f"passage {pid} not in cache {self.path}") from None
        stored_id, tokens = ENTRY.unpack_from(self._buf, off)
        if stored_id != pid:
            raise CacheFormatError(f"{self.path}: entry at {off} holds id {stored_id}, expected {pid}")
        start = off + ENTRY.size
        end = start + entry_size(tokens, self.c, self._np.itemsize) - ENTRY.size
        if end > len(self._buf):
            raise CacheFormatError(f"{self.path}: truncated entry {pid}")
        flat = np.frombuffer(self._buf, dtype=self._np, count=tokens * self.c + self.c, offset=start)
        mat = flat[:tokens * self.c].reshape(tokens, self.c).astype(np.float32)
        return mat, flat[tokens * self.c:].astype(np.float32)

    def read_entry(self, pid: int) -> Representation:
        mat, pooled = self._entry(pid)
        m = torch.from_numpy(mat)
        return Representation(m, torch.ones(m.shape[0], dtype=torch.long), torch.from_numpy(pooled),
                              0, self.compressed)

    get = read_entry

    def pooled_matrix(self) -> torch.Tensor:
        if self._pooled is None:
            rows = [self._entry(pid)[1] for pid in self.ids]
            self._pooled = torch.from_numpy(np.stack(rows)) if rows else torch.zeros(0, self.c)
        return self._pooled


def read_entry(cache: CacheReader, pid: int) -> Representation:
    return cache.read_entry(pid)
