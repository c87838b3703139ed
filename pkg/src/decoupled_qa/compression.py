"""Bottleneck layers around the cache boundary and their two-phase training.

Phase 1 fits only the compress/decompress pair to reconstruct frozen
input-stack outputs. Phase 2 trains the whole student with the distillation
objective, passages flowing through compress -> decompress.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from . import numeric as nx
from .data import Example, _pad
from .decoupled import CompressionPair, DecoupledModel, input_stack, passage_input
from .distill import DistillConfig, TrainConfig, fit, train_decoupled, write_trace
from .errors import ConfigError
from .numeric import Rng
from .transformer import INIT_STD, StandardModel


def attach_compression(model: DecoupledModel, c: int, seed: int, identity: bool = False) -> DecoupledModel:
    """Insert a randomly initialised (or identity, c == d only) bottleneck."""
    if model.compression is not None:
        raise ConfigError("model already has a compression pair")
    d = model.config.d
    pair = CompressionPair(d, c)
    with torch.no_grad():
        if identity:
            if c != d:
                raise ConfigError("identity bottleneck needs c == d")
            pair.compress_w.copy_(torch.eye(d))
            pair.decompress_w.copy_(torch.eye(d))
        else:
            rng = Rng(seed).child("compression")
            for name in ("compress_w", "decompress_w"):
                p = getattr(pair, name)
                p.copy_(torch.from_numpy(rng.child(name).truncated_normal(p.shape, INIT_STD)))
    model.compression = pair
    return model


def compression_rate(d: int, c: int) -> float:
    return d / c


@torch.no_grad()
def input_states(model: DecoupledModel, passages: Sequence[list[int]], batch_size: int = 256):
    """Eval-mode input-stack outputs, one (tokens, d) matrix per passage."""
    out = []
    for i in range(0, len(passages), batch_size):
        chunk = [passage_input(p) for p in passages[i:i + batch_size]]
        ids, mask = _pad(chunk)
        h = input_stack(model, ids, mask)
        out.extend(h[j, :len(row)].clone() for j, row in enumerate(chunk))
    return out


@dataclass
class _Recon:
    mse: torch.Tensor

    @property
    def total(self):
        return self.mse

    def floats(self):
        return {"recon_mse": float(self.mse.detach())}


def _stack(states: list[torch.Tensor]):
    width = max(s.shape[0] for s in states)
    h = states[0].new_zeros(len(states), width, states[0].shape[1])
    mask = torch.zeros(len(states), width, dtype=torch.long)
    for i, s in enumerate(states):
        h[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = 1
    return h, mask


def reconstruction_mse(pair: CompressionPair, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return nx.mse(pair.decompress(pair.compress(h)), h, mask)


def phase1_train(model: DecoupledModel, passages: Sequence[list[int]], cfg: TrainConfig,
                 trace_path=None) -> list[dict]:
    """Fit the bottleneck alone; every other parameter stays bit-identical."""
    if model.compression is None:
        raise ConfigError("attach a compression pair before phase 1")
    states = input_states(model, passages)
    pair = model.compression

    def loss_fn(batch, mode):
        h, mask = batch
        return _Recon(reconstruction_mse(pair, h, mask))

    params = [(n, p) for n, p in model.named_parameters() if n.startswith("compression.")]
    return fit(model, params, states, _stack, loss_fn, cfg, None, trace_path, tag="phase1")


@torch.no_grad()
def evaluate_reconstruction(model: DecoupledModel, passages: Sequence[list[int]]) -> float:
    h, mask = _stack(input_states(model, passages))
    return float(reconstruction_mse(model.compression, h, mask))


def phase2_train(model: DecoupledModel, train: Sequence[Example], teacher: StandardModel,
                 dcfg: DistillConfig, cfg: TrainConfig, eval_set=None, trace_path=None) -> list[dict]:
    """Joint training through the bottleneck with the distillation objective."""
    if model.compression is None:
        raise ConfigError("attach a compression pair before phase 2")
    return train_decoupled(teacher, model, train, dcfg, cfg, eval_set, trace_path, tag="phase2")


def train_two_phase(model: DecoupledModel, teacher: StandardModel, train: Sequence[Example],
                    dcfg: DistillConfig, phase1_cfg: TrainConfig, phase2_cfg: TrainConfig,
                    eval_set=None, skip_phase1: bool = False, skip_phase2: bool = False,
                    trace_path=None) -> list[dict]:
    """Run both phases (either can be skipped for ablations); returns the joined trace."""
    trace = []
    if not skip_phase1:
        passages = [e.passage for e in train]
        trace += phase1_train(model, passages, phase1_cfg)
    if not skip_phase2:
        trace += phase2_train(model, train, teacher, dcfg, phase2_cfg, eval_set)
    if trace_path is not None:
        write_trace(trace_path, trace)
    return trace
