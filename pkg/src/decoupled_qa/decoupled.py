"""Decoupled encoder: a per-input lower stack and a joint upper stack.

The input stack sees one input at a time (local positions from 0, local
segment 0). Its passage outputs can be computed offline and cached. The
cross stack sees ``[CLS] q [SEP]`` followed by ``p [SEP]``; before it runs,
global position and segment embeddings are added to re-encode where each
token sits in the concatenation and which side it came from.
"""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass

import torch
from torch import nn

from . import numeric as nx
from . import transformer as tf
from .errors import ConfigError, ShapeError
from .numeric import EVAL, Mode
from .transformer import (CLS, SEP, EncodeOutput, EncoderLayer, Embeddings, ModelConfig,
                          SpanHead, StandardModel)

# Counts stack passes; tests and the pipeline use it to check that a question
# goes through the input stack once no matter how many passages it meets.
stack_calls: Counter = Counter()


@contextmanager
def count_stack_calls():
    stack_calls.clear()
    yield stack_calls


@dataclass(frozen=True)
class SplitSpec:
    x: int
    y: int

    def __post_init__(self):
        if self.x < 1 or self.y < 1:
            raise ConfigError(f"split {self.x}-{self.y}: both sides need at least one layer")

    @classmethod
    def parse(cls, text: str) -> "SplitSpec":
        try:
            x, y = (int(v) for v in text.split("-"))
        except ValueError:
            raise ConfigError(f"split must look like '5-7', got {text!r}") from None
        return cls(x, y)

    def __str__(self) -> str:
        return f"{self.x}-{self.y}"


class CompressionPair(nn.Module):
    """Linear bottleneck d -> c -> d straddling the cache boundary."""

    def __init__(self, d: int, c: int):
        super().__init__()
        if not 1 <= c <= d:
            raise ConfigError(f"bottleneck dim {c} must be in [1, {d}]")
        self.c = c
        self.compress_w = nn.Parameter(torch.zeros(d, c))
        self.compress_b = nn.Parameter(torch.zeros(c))
        self.decompress_w = nn.Parameter(torch.zeros(c, d))
        self.decompress_b = nn.Parameter(torch.zeros(d))

    def compress(self, h: torch.Tensor) -> torch.Tensor:
        return nx.matmul(h, self.compress_w) + self.compress_b

    def decompress(self, z: torch.Tensor) -> torch.Tensor:
        return nx.matmul(z, self.decompress_w) + self.decompress_b


class DecoupledModel(nn.Module):
    def __init__(self, cfg: ModelConfig, split: SplitSpec):
        super().__init__()
        if split.x + split.y != cfg.n_layers:
            raise ConfigError(f"split {split} does not add up to {cfg.n_layers} layers")
        self.config = cfg
        self.split = split
        self.embeddings = Embeddings(cfg)
        self.input_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(split.x))
        self.global_position = nn.Parameter(torch.zeros(cfg.max_positions, cfg.d))
        self.global_segment = nn.Parameter(torch.zeros(cfg.n_segments, cfg.d))
        self.cross_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(split.y))
        self.head = SpanHead(cfg)
        self.compression: CompressionPair | None = None

    @property
    def bottleneck(self) -> int:
        return self.config.d if self.compression is None else self.compression.c


@dataclass
class Representation:
    """Input-stack output for one input (question or passage).

    ``compressed`` marks a passage matrix already projected to the bottleneck
    width; the cross stack decompresses it on entry.
    """

    matrix: torch.Tensor
    mask: torch.Tensor
    pooled: torch.Tensor
    segment_id: int = 0
    compressed: bool = False

    @property
    def token_count(self) -> int:
        return self.matrix.shape[0]


def pooled_mean(matrix: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(matrix.dtype).unsqueeze(-1)
    return (matrix * m).sum(dim=-2) / m.sum(dim=-2)


def split_model(standard: StandardModel, spec: SplitSpec) -> DecoupledModel:
    """Build a decoupled student whose weights are copies of ``standard``'s."""
    cfg = standard.config
    model = DecoupledModel(cfg, spec)
    model.embeddings.load_state_dict(standard.embeddings.state_dict())
    for dst, src in zip(list(model.input_layers) + list(model.cross_layers), standard.layers):
        dst.load_state_dict(src.state_dict())
    model.head.load_state_dict(standard.head.state_dict())
    with torch.no_grad():
        model.global_position.copy_(standard.embeddings.position)
        model.global_segment.copy_(standard.embeddings.segment)
    return model


# --------------------------------------------------------------------------
# input stack


def input_stack(model: DecoupledModel, ids: torch.Tensor, mask: torch.Tensor,
                mode: Mode = EVAL) -> torch.Tensor:
    """Batched input-stack pass over (B, L) ids; returns layer-x states (B, L, d)."""
    if (mask.sum(dim=-1) == 0).any():
        raise ShapeError("input has no unmasked tokens")
    cfg = model.config
    positions = torch.arange(ids.shape[1]).expand_as(ids)
    h = tf.embed(model.embeddings, ids, positions, torch.zeros_like(ids), cfg, mode)
    hidden, _, _ = tf.run_stack(model.input_layers, h, mask, cfg, mode)
    stack_calls["input"] += ids.shape[0]
    return hidden[-1]


def encode_input(model: DecoupledModel, ids, mask=None, mode: Mode = EVAL,
                 compress: bool = False) -> Representation:
    """Representation of a single input. ``compress`` applies the bottleneck
    (passages headed for the cache); the pooled vector is taken afterwards."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    mask = (ids != tf.PAD).long() if mask is None else torch.as_tensor(mask, dtype=torch.long)
    if ids.dim() != 1:
        raise ShapeError(f"encode_input takes one sequence, got shape {tuple(ids.shape)}")
    h = input_stack(model, ids[None], mask[None], mode)[0]
    compressed = False
    if compress and model.compression is not None:
        h = model.compression.compress(h)
        compressed = True
    return Representation(h, mask, pooled_mean(h, mask), 0, compressed)


def question_input(question: list[int]) -> list[int]:
    return [CLS, *question, SEP]


def passage_input(passage: list[int]) -> list[int]:
    return [*passage, SEP]


# --------------------------------------------------------------------------
# cross stack


def _cross_stack(model: DecoupledModel, h: torch.Tensor, segments: torch.Tensor,
                 mask: torch.Tensor, mode: Mode) -> EncodeOutput:
    cfg = model.config
    if h.shape[1] > cfg.max_positions:
        raise ShapeError(f"combined length {h.shape[1]} exceeds max positions {cfg.max_positions}")
    positions = torch.arange(h.shape[1]).expand(h.shape[0], -1)
    h = h + nx.embedding(model.global_position, positions) + nx.embedding(model.global_segment, segments)
    hidden, attns, probs = tf.run_stack(model.cross_layers, h, mask, cfg, mode)
    start, end = tf.span_logits(model.head, hidden[-1])
    stack_calls["cross"] += h.shape[0]
    return EncodeOutput(hidden, attns, start, end, mask, probs)


def _decompressed(model: DecoupledModel, rep: Representation) -> torch.Tensor:
    if not rep.compressed:
        return rep.matrix
    if model.compression is None:
        raise ConfigError("compressed representation but model has no decompression layer")
    return model.compression.decompress(rep.matrix)


def cross_forward(model: DecoupledModel, question_rep: Representation,
                  passage_rep: Representation | None, mode: Mode = EVAL) -> EncodeOutput:
    """Run the cross stack over one question/passage pair (passage may be None)."""
    q = question_rep.matrix
    parts, masks = [q], [question_rep.mask]
    if passage_rep is not None and passage_rep.token_count:
        parts.append(_decompressed(model, passage_rep).to(q.dtype))
        masks.append(passage_rep.mask)
    h = nx.concat(parts, dim=0)
    mask = torch.cat(masks)
    segments = torch.cat([torch.zeros(q.shape[0], dtype=torch.long),
                          torch.ones(h.shape[0] - q.shape[0], dtype=torch.long)])
    out = _cross_stack(model, h[None], segments[None], mask[None], mode)
    return tf.unbatch(out)


def full_forward(model: DecoupledModel, question: list[int], passage: list[int],
                 mode: Mode = EVAL) -> EncodeOutput:
    """Encode both inputs separately, then run the cross stack.

    Passages take the compress/decompress round trip when the model has a
    bottleneck, so results match what a cache-backed reader would see.
    """
    q = encode_input(model, question_input(question), mode=mode)
    p = encode_input(model, passage_input(passage), mode=mode, compress=True)
    return cross_forward(model, q, p, mode)


# --------------------------------------------------------------------------
# batched path used by training and evaluation


def pack_index(q_mask: torch.Tensor, p_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Gather indices that move each row's passage tokens flush against its
    question tokens, so padding ends up at the tail as in the standard layout.

    Returns (index into cat([q, p], dim=1), packed mask, packed segment ids).
    """
    B, Lq = q_mask.shape
    Lp = p_mask.shape[1]
    qlen = q_mask.sum(dim=1, keepdim=True)
    plen = p_mask.sum(dim=1, keepdim=True)
    j = torch.arange(Lq + Lp).expand(B, -1)
    in_q = j < qlen
    in_p = (j >= qlen) & (j < qlen + plen)
    index = torch.where(in_q, j, torch.where(in_p, Lq + j - qlen, torch.zeros_like(j)))
    mask = (in_q | in_p).long()
    segments = in_p.long()
    return index, mask, segments


def forward_batch(model: DecoupledModel, q_ids: torch.Tensor, q_mask: torch.Tensor,
                  p_ids: torch.Tensor, p_mask: torch.Tensor, mode: Mode = EVAL,
                  passage_states: torch.Tensor | None = None) -> EncodeOutput:
    """Batched decoupled forward; output is token-aligned with the standard
    model run on ``[CLS] q [SEP] p [SEP]`` padded to Lq + Lp.

    ``passage_states`` (already decompressed) skips the passage input stack.
    """
    q = input_stack(model, q_ids, q_mask, mode)
    if passage_states is None:
        p = input_stack(model, p_ids, p_mask, mode)
        if model.compression is not None:
            p = model.compression.decompress(model.compression.compress(p))
    else:
        p = passage_states
    index, mask, segments = pack_index(q_mask, p_mask)
    h = torch.cat([q, p], dim=1)
    h = h.gather(1, index.unsqueeze(-1).expand(-1, -1, h.shape[-1]))
    return _cross_stack(model, h, segments, mask, mode)
