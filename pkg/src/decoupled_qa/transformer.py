"""Standard post-LN transformer encoder with an extractive span head.

Input layout is ``[CLS] question [SEP] passage [SEP]``; segment 0 covers
CLS, the question and the first SEP, segment 1 the passage and final SEP.
Position 0 (CLS) doubles as the no-answer span.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import numeric as nx
from .errors import ConfigError, ShapeError
from .numeric import EVAL, Mode, Rng

PAD, CLS, SEP = 0, 1, 2
INIT_STD = 0.02
MAX_ANSWER_LEN = 30


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d: int = 64
    n_heads: int = 4
    ffn: int = 128
    vocab_size: int = 48
    max_positions: int = 64
    n_segments: int = 2
    dropout: float = 0.1
    attention_dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"hidden size {self.d} not divisible by {self.n_heads} heads")
        if min(self.n_layers, self.d, self.n_heads, self.ffn, self.vocab_size, self.max_positions) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.n_segments != 2:
            raise ConfigError("n_segments must be 2")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderLayer(nn.Module):
    """Weights for one layer; projections are stored (in, out) and applied as x @ W."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d, cfg.ffn
        for name in ("w_q", "w_k", "w_v", "w_o"):
            setattr(self, name, nn.Parameter(torch.zeros(d, d)))
        for name in ("b_q", "b_k", "b_v", "b_o"):
            setattr(self, name, nn.Parameter(torch.zeros(d)))
        self.ln1_g = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.w_in = nn.Parameter(torch.zeros(d, f))
        self.b_in = nn.Parameter(torch.zeros(f))
        self.w_out = nn.Parameter(torch.zeros(f, d))
        self.b_out = nn.Parameter(torch.zeros(d))
        self.ln2_g = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))


class Embeddings(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.token = nn.Parameter(torch.zeros(cfg.vocab_size, cfg.d))
        self.position = nn.Parameter(torch.zeros(cfg.max_positions, cfg.d))
        self.segment = nn.Parameter(torch.zeros(cfg.n_segments, cfg.d))
        self.ln_g = nn.Parameter(torch.ones(cfg.d))
        self.ln_b = nn.Parameter(torch.zeros(cfg.d))


class SpanHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.start = nn.Parameter(torch.zeros(cfg.d))
        self.end = nn.Parameter(torch.zeros(cfg.d))


class StandardModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.embeddings = Embeddings(cfg)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.head = SpanHead(cfg)


@dataclass
class EncodeOutput:
    """Activations of one forward pass.

    ``hidden_states[0]`` is the stack input (embedding output), then one entry
    per layer. ``attention_outputs[i]`` is layer i's attention sublayer output
    after the output projection, before the residual add.
    """

    hidden_states: list[torch.Tensor]
    attention_outputs: list[torch.Tensor]
    start_logits: torch.Tensor
    end_logits: torch.Tensor
    mask: torch.Tensor
    attention_probs: list[torch.Tensor] = field(default_factory=list)

    @property
    def final_hidden(self) -> torch.Tensor:
        return self.hidden_states[-1]

    @property
    def final_attention(self) -> torch.Tensor:
        return self.attention_outputs[-1]


@dataclass(frozen=True)
class SpanAnswer:
    start: int
    end: int
    score: float
    is_no_answer: bool


def init_parameters(module: nn.Module, rng: Rng) -> None:
    """Truncated normal (std 0.02) for matrices and tables, zeros for biases,
    ones for LayerNorm gains. Each parameter draws from its own named stream."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("b_") or leaf.endswith("_b") or leaf == "bias":
                p.zero_()
            elif leaf.endswith("_g"):
                p.fill_(1.0)
            else:
                p.copy_(torch.from_numpy(rng.child(name).truncated_normal(p.shape, INIT_STD)))


def init_standard(cfg: ModelConfig, seed: int) -> StandardModel:
    model = StandardModel(cfg)
    init_parameters(model, Rng(seed).child("init"))
    return model


# --------------------------------------------------------------------------
# forward


def embed(emb: Embeddings, ids: torch.Tensor, positions: torch.Tensor, segments: torch.Tensor,
          cfg: ModelConfig, mode: Mode) -> torch.Tensor:
    if ids.shape[-1] > cfg.max_positions:
        raise ShapeError(f"sequence length {ids.shape[-1]} exceeds max positions {cfg.max_positions}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= cfg.vocab_size):
        raise ShapeError(f"token id outside vocabulary of size {cfg.vocab_size}")
    x = nx.embedding(emb.token, ids) + nx.embedding(emb.position, positions) \
        + nx.embedding(emb.segment, segments)
    x = nx.layernorm(x, emb.ln_g, emb.ln_b)
    return nx.dropout(x, cfg.dropout, mode)


def layer_forward(layer: EncoderLayer, h: torch.Tensor, mask: torch.Tensor, cfg: ModelConfig,
                  mode: Mode) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One post-LN encoder layer on ``h`` of shape (B, L, d) with key mask (B, L).

    Returns (output, attention sublayer output, attention probabilities).
    """
    B, L, d = h.shape
    nh, hd = cfg.n_heads, cfg.head_dim

    def heads(t):
        return t.reshape(B, L, nh, hd).transpose(1, 2)

    q = heads(nx.matmul(h, layer.w_q) + layer.b_q)
    k = heads(nx.matmul(h, layer.w_k) + layer.b_k)
    v = heads(nx.matmul(h, layer.w_v) + layer.b_v)
    scores = (q @ k.transpose(-1, -2)) * (1.0 / hd ** 0.5)
    probs = nx.softmax(scores, mask[:, None, None, :])
    ctx = nx.dropout(probs, cfg.attention_dropout, mode) @ v
    ctx = ctx.transpose(1, 2).reshape(B, L, d)
    attn = nx.matmul(ctx, layer.w_o) + layer.b_o
    h1 = nx.layernorm(h + nx.dropout(attn, cfg.dropout, mode), layer.ln1_g, layer.ln1_b)
    ff = nx.matmul(nx.gelu(nx.matmul(h1, layer.w_in) + layer.b_in), layer.w_out) + layer.b_out
    h2 = nx.layernorm(h1 + nx.dropout(ff, cfg.dropout, mode), layer.ln2_g, layer.ln2_b)
    return h2, attn, probs


def run_stack(layers, h: torch.Tensor, mask: torch.Tensor, cfg: ModelConfig, mode: Mode):
    hidden, attns, probs = [h], [], []
    for layer in layers:
        h, a, p = layer_forward(layer, h, mask, cfg, mode)
        hidden.append(h)
        attns.append(a)
        probs.append(p)
    return hidden, attns, probs


def span_logits(head: SpanHead, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return h @ head.start, h @ head.end


def _batched(*ts: torch.Tensor | None):
    single = ts[0].dim() == 1
    if single:
        ts = tuple(None if t is None else t.unsqueeze(0) for t in ts)
    return single, ts


def unbatch(out: EncodeOutput) -> EncodeOutput:
    return EncodeOutput(
        hidden_states=[h[0] for h in out.hidden_states],
        attention_outputs=[a[0] for a in out.attention_outputs],
        start_logits=out.start_logits[0], end_logits=out.end_logits[0], mask=out.mask[0],
        attention_probs=[p[0] for p in out.attention_probs],
    )


def encode(model: StandardModel, ids: torch.Tensor, segments: torch.Tensor,
           mask: torch.Tensor | None = None, mode: Mode = EVAL) -> EncodeOutput:
    """Full forward. Accepts (L,) or (B, L) inputs; output matches."""
    if mask is None:
        mask = (ids != PAD).long()
    single, (ids, segments, mask) = _batched(ids, segments, mask)
    if segments.numel() and int(segments.max()) > 1:
        raise ShapeError("segment ids must be 0 or 1")
    cfg = model.config
    positions = torch.arange(ids.shape[1]).expand_as(ids)
    h = embed(model.embeddings, ids, positions, segments, cfg, mode)
    hidden, attns, probs = run_stack(model.layers, h, mask, cfg, mode)
    start, end = span_logits(model.head, hidden[-1])
    out = EncodeOutput(hidden, attns, start, end, mask, probs)
    return unbatch(out) if single else out


def build_input(question: list[int], passage: list[int]) -> tuple[list[int], list[int]]:
    """Token and segment ids for ``[CLS] q [SEP] p [SEP]``."""
    ids = [CLS, *question, SEP, *passage, SEP]
    segs = [0] * (len(question) + 2) + [1] * (len(passage) + 1)
    return ids, segs


def passage_bounds(question_len: int, passage_len: int) -> tuple[int, int]:
    """Inclusive positions of passage tokens in the concatenated layout."""
    start = question_len + 2
    return start, start + passage_len - 1


# --------------------------------------------------------------------------
# span prediction and loss


def predict_span(start_logits, end_logits, bounds: tuple[int, int],
                 max_answer_len: int = MAX_ANSWER_LEN) -> SpanAnswer:
    """Best span s <= e, e - s + 1 <= max_answer_len, inside ``bounds``.

    Score is start[s] + end[e]. The CLS no-answer score start[0] + end[0]
    wins ties; among spans, the smaller start then smaller end wins.
    """
    start = np.asarray(start_logits.detach() if torch.is_tensor(start_logits) else start_logits,
                       dtype=np.float64)
    end = np.asarray(end_logits.detach() if torch.is_tensor(end_logits) else end_logits,
                     dtype=np.float64)
    null = float(start[0] + end[0])
    lo, hi = bounds
    lo, hi = max(lo, 1), min(hi, len(start) - 1)
    if hi < lo:
        return SpanAnswer(0, 0, null, True)
    n = hi - lo + 1
    pair = start[lo:hi + 1, None] + end[None, lo:hi + 1]
    offs = np.arange(n)[None, :] - np.arange(n)[:, None]
    pair = np.where((offs >= 0) & (offs < max_answer_len), pair, -np.inf)
    flat = int(np.argmax(pair))  # first max in row-major order: smallest s, then e
    s, e = divmod(flat, n)
    best = float(pair[s, e])
    if not best > null:
        return SpanAnswer(0, 0, null, True)
    return SpanAnswer(lo + s, lo + e, best, False)


def span_ce_loss(start_logits: torch.Tensor, end_logits: torch.Tensor, gold_start, gold_end,
                 mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of the start-position and end-position cross entropies."""
    gs = torch.as_tensor(gold_start).reshape(-1)
    ge = torch.as_tensor(gold_end).reshape(-1)
    length = start_logits.shape[-1]
    if int(torch.cat([gs, ge]).max()) >= length or int(torch.cat([gs, ge]).min()) < 0:
        raise ShapeError(f"gold index outside sequence of length {length}")
    return 0.5 * (nx.cross_entropy(start_logits, gs, mask) + nx.cross_entropy(end_logits, ge, mask))
