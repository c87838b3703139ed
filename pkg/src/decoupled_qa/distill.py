"""Distillation objective, training loops, and EM/F1 evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import torch
from torch import nn

from . import numeric as nx
from .data import Batch, Example, batches, make_batch
from .decoupled import DecoupledModel, forward_batch
from .errors import ConfigError, NumericError, ShapeError
from .numeric import EVAL, AdamState, Mode, Rng
from .transformer import EncodeOutput, StandardModel, encode, predict_span, span_ce_loss


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.95
    temperature: float = 3.0
    sigma: float = 0.5
    use_kl: bool = True
    use_mse_repr: bool = True
    use_mse_attn: bool = True
    mse_all_layers: bool = False
    freeze_global_embeddings: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    warmup_steps: int = 200
    layer_lr_decay: float = 0.95
    batch_size: int = 32
    epochs: int = 4
    clip_norm: float = 3.0
    seed: int = 0
    schedule: str = "linear"  # linear warmup then linear decay to 0; "constant" skips both
    adam_eps: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        if self.schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and lr > 0 required")


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    kl: torch.Tensor
    mse_repr: torch.Tensor
    mse_attn: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


# --------------------------------------------------------------------------
# objective


def kd_loss(student: EncodeOutput, teacher: EncodeOutput, gold_start, gold_end,
            cfg: DistillConfig) -> LossBreakdown:
    """(1 - lam) CE + lam T^2 KL(teacher || student) + sigma (MSE_repr + MSE_attn).

    The KL term averages the start and end position distributions. Teacher
    tensors are detached. Disabled terms are reported as 0.
    """
    if student.start_logits.shape != teacher.start_logits.shape or \
            student.final_hidden.shape != teacher.final_hidden.shape:
        raise ShapeError(f"student/teacher misaligned: {tuple(student.final_hidden.shape)} "
                         f"vs {tuple(teacher.final_hidden.shape)}")
    mask = student.mask
    zero = student.start_logits.new_zeros(())
    ce = span_ce_loss(student.start_logits, student.end_logits, gold_start, gold_end, mask)

    kl = zero
    if cfg.use_kl:
        t = cfg.temperature
        kl = 0.5 * (nx.kl_divergence(teacher.start_logits.detach() / t, student.start_logits / t, mask)
                    + nx.kl_divergence(teacher.end_logits.detach() / t, student.end_logits / t, mask))
        kl = kl * t * t

    depth = len(student.attention_outputs) if cfg.mse_all_layers else 1

    def layer_mse(s_list, t_list):
        return sum(nx.mse(s_list[-j], t_list[-j].detach(), mask) for j in range(1, depth + 1))

    mse_repr = layer_mse(student.hidden_states, teacher.hidden_states) if cfg.use_mse_repr else zero
    mse_attn = layer_mse(student.attention_outputs, teacher.attention_outputs) if cfg.use_mse_attn else zero
    total = (1.0 - cfg.lam) * ce + cfg.lam * kl + cfg.sigma * mse_repr + cfg.sigma * mse_attn
    return LossBreakdown(ce, kl, mse_repr, mse_attn, total)


# --------------------------------------------------------------------------
# evaluation


def example_scores(pred_start: int, pred_end: int, gold_start: int, gold_end: int) -> tuple[float, float]:
    """(EM, F1) for one example over token positions; no-answer is (0, 0)."""
    pred_null, gold_null = pred_start == 0, gold_start == 0
    if pred_null or gold_null:
        hit = float(pred_null and gold_null)
        return hit, hit
    em = float(pred_start == gold_start and pred_end == gold_end)
    overlap = max(0, min(pred_end, gold_end) - max(pred_start, gold_start) + 1)
    if overlap == 0:
        return em, 0.0
    precision = overlap / (pred_end - pred_start + 1)
    recall = overlap / (gold_end - gold_start + 1)
    return em, 2 * precision * recall / (precision + recall)


def forward(model: nn.Module, batch: Batch, mode: Mode = EVAL,
            passage_states: torch.Tensor | None = None) -> EncodeOutput:
    if isinstance(model, DecoupledModel):
        return forward_batch(model, batch.q_ids, batch.q_mask, batch.p_ids, batch.p_mask, mode,
                             passage_states=passage_states)
    return encode(model, batch.ids, batch.segments, batch.mask, mode)


@torch.no_grad()
def predict(model: nn.Module, examples: Sequence[Example], batch_size: int = 256,
            passage_states: Callable[[Batch], torch.Tensor] | None = None):
    out = []
    for batch in batches(list(examples), batch_size):
        states = None if passage_states is None else passage_states(batch)
        res = forward(model, batch, EVAL, states)
        for i, ex in enumerate(batch.examples):
            out.append(predict_span(res.start_logits[i], res.end_logits[i], ex.bounds()))
    return out


def evaluate(model: nn.Module, examples: Sequence[Example], batch_size: int = 256,
             passage_states: Callable[[Batch], torch.Tensor] | None = None) -> dict[str, float]:
    """EM and F1 in percent, rounded to 0.1."""
    if not examples:
        raise ConfigError("cannot evaluate on an empty dataset")
    preds = predict(model, examples, batch_size, passage_states)
    em = f1 = 0.0
    for p, ex in zip(preds, examples):
        e, f = example_scores(p.start, p.end, ex.gold_start, ex.gold_end)
        em += e
        f1 += f
    n = len(examples)
    return {"EM": round(100 * em / n, 1), "F1": round(100 * f1 / n, 1)}


# --------------------------------------------------------------------------
# training


def layer_lr_scales(model: nn.Module, decay: float) -> dict[str, float]:
    """Per-parameter LR multipliers: the top layer and the span head get the
    full rate, each layer below gets another factor of ``decay``, embeddings
    sit one step below the bottom layer. Global embeddings and the
    decompressor share the first cross layer's rate; the compressor shares
    the last input layer's."""
    n = model.config.n_layers
    scales = {}
    for name, _ in model.named_parameters():
        parts = name.split(".")
        if parts[0] == "layers":
            depth = n - 1 - int(parts[1])
        elif parts[0] == "input_layers":
            depth = n - 1 - int(parts[1])
        elif parts[0] == "cross_layers":
            depth = n - 1 - (model.split.x + int(parts[1]))
        elif parts[0] == "embeddings":
            depth = n
        elif parts[0] in ("global_position", "global_segment") or name.startswith("compression.decompress"):
            depth = model.split.y - 1
        elif name.startswith("compression.compress"):
            depth = model.split.y
        else:
            depth = 0
        scales[name] = decay ** depth
    return scales


def write_trace(path, records) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def fit(model: nn.Module, params: list[tuple[str, nn.Parameter]], items: Sequence, collate,
        loss_fn, cfg: TrainConfig, eval_fn=None, trace_path=None, tag: str = "train",
        rng: Rng | None = None) -> list[dict]:
    """Shared Adam loop. ``loss_fn(batch, mode)`` returns a LossBreakdown-like
    object with ``total`` and ``floats()``. Returns one trace record per epoch."""
    if not items:
        raise ConfigError("training set is empty")
    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = cfg.warmup_steps if cfg.schedule == "linear" else 0
    if warmup > total:
        raise ConfigError(f"warmup ({warmup}) exceeds total steps ({total})")
    rng = rng or Rng(cfg.seed).child(tag)
    scales_all = layer_lr_scales(model, cfg.layer_lr_decay)
    names = [n for n, _ in params]
    tensors = [p for _, p in params]
    scales = [scales_all[n] for n in names]
    state = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    trace, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.child(f"shuffle/{epoch}").permutation(len(items))
        sums: dict[str, float] = {}
        count = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = collate([items[j] for j in order[i:i + cfg.batch_size]])
            step += 1
            mode = Mode(train=True, rng=rng.child(f"dropout/{step}"))
            parts = loss_fn(batch, mode)
            if not torch.isfinite(parts.total):
                raise NumericError(f"non-finite loss at batch {step}")
            grads = nx.backward(parts.total, tensors)
            mult = 1.0 if cfg.schedule == "constant" else nx.linear_warmup_decay(step, total, warmup)
            nx.adam_step(tensors, grads, state, clip=cfg.clip_norm, lr_scales=scales, lr=cfg.lr * mult)
            for k, v in parts.floats().items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        record = {"tag": tag, "epoch": epoch + 1, "step": step}
        record.update({k: v / count for k, v in sums.items()})
        if eval_fn is not None:
            record.update(eval_fn())
        trace.append(record)
    write_trace(trace_path, trace)
    return trace


@dataclass
class _CE:
    ce: torch.Tensor

    @property
    def total(self):
        return self.ce

    def floats(self):
        return {"ce": float(self.ce.detach())}


def train_standard(model: StandardModel, train: Sequence[Example], cfg: TrainConfig,
                   eval_set: Sequence[Example] | None = None, trace_path=None) -> list[dict]:
    """Fine-tune a standard model on span cross entropy (the teacher)."""

    def loss_fn(batch: Batch, mode: Mode):
        out = encode(model, batch.ids, batch.segments, batch.mask, mode)
        return _CE(span_ce_loss(out.start_logits, out.end_logits, batch.gold_start, batch.gold_end, out.mask))

    eval_fn = (lambda: evaluate(model, eval_set)) if eval_set else None
    return fit(model, list(model.named_parameters()), list(train), make_batch, loss_fn, cfg,
               eval_fn, trace_path, tag="teacher")


def trainable_student_params(student: DecoupledModel, dcfg: DistillConfig):
    frozen = {"global_position", "global_segment"} if dcfg.freeze_global_embeddings else set()
    return [(n, p) for n, p in student.named_parameters() if n not in frozen]


def train_decoupled(teacher: StandardModel, student: DecoupledModel, train: Sequence[Example],
                    dcfg: DistillConfig, cfg: TrainConfig, eval_set: Sequence[Example] | None = None,
                    trace_path=None, tag: str = "distill") -> list[dict]:
    """Distil ``teacher`` into ``student`` (updated in place). Teacher runs in
    eval mode without gradients."""
    for p in teacher.parameters():
        p.requires_grad_(False)

    def loss_fn(batch: Batch, mode: Mode):
        with torch.no_grad():
            t_out = encode(teacher, batch.ids, batch.segments, batch.mask, EVAL)
        s_out = forward_batch(student, batch.q_ids, batch.q_mask, batch.p_ids, batch.p_mask, mode)
        return kd_loss(s_out, t_out, batch.gold_start, batch.gold_end, dcfg)

    eval_fn = (lambda: evaluate(student, eval_set)) if eval_set else None
    try:
        return fit(student, trainable_student_params(student, dcfg), list(train), make_batch, loss_fn,
                   cfg, eval_fn, trace_path, tag=tag)
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
