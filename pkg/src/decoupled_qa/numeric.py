"""Dense tensor primitives, gradients, Adam, and seeded randomness.

Tensors are plain ``torch.Tensor`` values; reverse-mode gradients come from
torch autograd. The ops here pin down the numerical conventions the models
rely on (LayerNorm epsilon, exact GELU, mask handling) so every caller uses
the same definitions.

Randomness never touches torch's global generator. All draws go through
:class:`Rng`, a named tree of numpy ``Philox`` (counter-based, 4x64-10)
streams. A child stream is keyed by ``SeedSequence([seed, crc32(path)])``,
where ``path`` is the slash-joined list of child names, so the stream for
``Rng(7).child("init").child("layers.0.w_q")`` does not depend on how many
other streams were drawn before it.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import NumericError, ShapeError

LAYERNORM_EPS = 1e-12
MASK_FILL = -1e9  # finite, so masked log-probs stay finite and 0 * logp == 0


# --------------------------------------------------------------------------
# randomness


class Rng:
    """Splittable counter-based random stream."""

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed)
        self.path = path
        entropy = [self.seed, zlib.crc32(path.encode("utf-8"))]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}" if self.path else name)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.random(tuple(shape), dtype=np.float64)

    def truncated_normal(self, shape: Sequence[int], std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) draws, resampled until inside +-bound*std."""
        out = self._gen.standard_normal(tuple(shape))
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


@dataclass
class Mode:
    """Forward-pass mode. ``train`` enables dropout drawn from ``rng``."""

    train: bool = False
    rng: Rng | None = None

    def __post_init__(self):
        if self.train and self.rng is None:
            raise ValueError("train mode needs an Rng for dropout masks")


EVAL = Mode()


# --------------------------------------------------------------------------
# forward ops


def _check(cond: bool, what: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if not cond:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0], "matmul", a, b)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _check(False, "add", a, b)
    return a + b


def scale(a: torch.Tensor, s: float) -> torch.Tensor:
    return a * s


def concat(parts: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    ref = parts[0]
    for p in parts[1:]:
        same = p.dim() == ref.dim() and all(
            p.shape[i] == ref.shape[i] for i in range(ref.dim()) if i != dim % ref.dim()
        )
        _check(same, "concat", ref, p)
    return torch.cat(list(parts), dim=dim)


def slice_rows(a: torch.Tensor, start: int, stop: int) -> torch.Tensor:
    return a[..., start:stop, :]


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        bad = int(ids.max()) if int(ids.max()) >= table.shape[0] else int(ids.min())
        raise ShapeError(f"id {bad} outside table of {table.shape[0]} rows")
    return table[ids]


def layernorm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
              eps: float = LAYERNORM_EPS) -> torch.Tensor:
    _check(x.shape[-1] == gamma.shape[-1], "layernorm", x, gamma)
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact form: x * Phi(x) with the Gaussian CDF via erf."""
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def _masked(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return x
    ok = mask.dim() <= x.dim() and all(
        m in (1, n) for m, n in zip(reversed(mask.shape), reversed(x.shape)))
    _check(ok, "mask", x, mask)
    return x.masked_fill(mask == 0, MASK_FILL)


def softmax(x: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    """Row-wise softmax; positions with mask 0 get exactly zero probability."""
    return torch.softmax(_masked(x, mask), dim=dim)


def log_softmax(x: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(_masked(x, mask), dim=dim)


def dropout(x: torch.Tensor, rate: float, mode: Mode) -> torch.Tensor:
    if not mode.train or rate <= 0.0:
        return x
    keep = mode.rng.generator.random(tuple(x.shape), dtype=np.float32) >= rate
    return x * torch.from_numpy(keep).to(x.dtype) * (1.0 / (1.0 - rate))


def mse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error; with a token mask, padded rows are left out of the mean."""
    _check(a.shape == b.shape, "mse", a, b)
    sq = (a - b) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(a.dtype).unsqueeze(-1)
    return (sq * m).sum() / (m.sum() * a.shape[-1])


def cross_entropy(logits: torch.Tensor, target: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    if logits.dim() == 1:
        logits, target = logits.unsqueeze(0), target.reshape(1)
        mask = None if mask is None else mask.unsqueeze(0)
    if int(target.min()) < 0 or int(target.max()) >= logits.shape[-1]:
        raise ShapeError(f"target index outside sequence of length {logits.shape[-1]}")
    logp = log_softmax(logits, mask)
    return -logp.gather(-1, target.long().unsqueeze(-1)).mean()


def kl_divergence(ref_logits: torch.Tensor, logits: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """KL(softmax(ref_logits) || softmax(logits)), averaged over leading dims."""
    _check(ref_logits.shape == logits.shape, "kl_divergence", ref_logits, logits)
    logp_ref = log_softmax(ref_logits, mask)
    logq = log_softmax(logits, mask)
    p_ref = logp_ref.exp()
    kl = (p_ref * (logp_ref - logq)).sum(dim=-1)
    return kl.mean()


# --------------------------------------------------------------------------
# gradients and optimisation


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``params`` (zeros where unused)."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def global_norm(grads: Iterable[torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def clip_by_global_norm(grads: list[torch.Tensor], max_norm: float) -> tuple[list[torch.Tensor], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


def linear_warmup_decay(step: int, total: int, warmup: int) -> float:
    """LR multiplier for 1-based ``step``: linear ramp, then linear decay to 0."""
    if warmup > 0 and step <= warmup:
        return step / warmup
    return max(0.0, (total - step) / max(1, total - warmup))


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    t: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              clip: float = 0.0, lr_scales: Sequence[float] | None = None,
              lr: float | None = None) -> float:
    """One bias-corrected Adam update in place; returns the pre-clip grad norm.

    ``lr`` overrides ``state.lr`` for this step (schedules), ``lr_scales`` are
    per-parameter multipliers (layer-wise decay).
    """
    grads = list(grads)
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient at step {state.t + 1}")
    grads, norm = clip_by_global_norm(grads, clip)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.t += 1
    base = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            m, v = state.m[i], state.v[i]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            step_lr = base * (1.0 if lr_scales is None else lr_scales[i])
            p.sub_(step_lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return norm
