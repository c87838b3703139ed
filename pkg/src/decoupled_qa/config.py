"""Run configuration: one YAML file, explicit defaults, unknown keys rejected."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import SyntheticTaskSpec
from .distill import DistillConfig, TrainConfig
from .errors import ConfigError
from .transformer import ModelConfig


@dataclass
class TaskSection:
    vocab_size: int = 24
    passage_len: list = field(default_factory=lambda: [6, 12])
    key_prob: float = 0.5
    answer_len: list = field(default_factory=lambda: [1, 3])
    n_train: int = 16000
    n_eval: int = 2000


@dataclass
class ModelSection:
    n_layers: int = 4
    d: int = 64
    n_heads: int = 4
    ffn: int = 128
    max_positions: int = 32
    # no dropout: at this scale it only delays the teacher's escape from the majority plateau
    dropout: float = 0.0
    attention_dropout: float = 0.0


@dataclass
class TrainSection:
    """Optimiser settings; the run seed is injected, so no ``seed`` key here."""

    lr: float = 5e-5
    warmup_steps: int = 200
    layer_lr_decay: float = 0.95
    batch_size: int = 32
    epochs: int = 4
    clip_norm: float = 3.0
    schedule: str = "linear"
    adam_eps: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999


@dataclass
class DistillSection:
    lam: float = 0.95
    temperature: float = 3.0
    sigma: float = 0.5
    use_kl: bool = True
    use_mse_repr: bool = True
    use_mse_attn: bool = True
    mse_all_layers: bool = False
    freeze_global_embeddings: bool = False


@dataclass
class CompressionSection:
    dim: int = 16
    skip_phase1: bool = False
    skip_phase2: bool = False
    phase1: TrainSection = field(default_factory=lambda: TrainSection(lr=1e-3, warmup_steps=20, epochs=4))
    phase2: TrainSection = field(default_factory=lambda: TrainSection(lr=5e-4, epochs=2))


@dataclass
class CacheSection:
    dtype: str = "f16"


@dataclass
class AskSection:
    k: int = 5
    n_questions: int = 50


@dataclass
class BenchSection:
    scenario: str = "long"
    repeats: int = 8
    layers: int = 12
    d: int = 256
    n_heads: int = 4
    ffn: int = 1024
    split: str = "5-7"
    compress_factor: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    split: str = "2-2"
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher_train: TrainSection = field(
        default_factory=lambda: TrainSection(lr=1e-3, epochs=10))
    distill: DistillSection = field(default_factory=DistillSection)
    distill_train: TrainSection = field(default_factory=lambda: TrainSection(lr=1e-3, epochs=5))
    compression: CompressionSection = field(default_factory=CompressionSection)
    cache: CacheSection = field(default_factory=CacheSection)
    ask: AskSection = field(default_factory=AskSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # -- derived objects -------------------------------------------------

    def task_spec(self, split: str = "train") -> SyntheticTaskSpec:
        seed = self.seed * 2 + (0 if split == "train" else 1)
        return SyntheticTaskSpec(self.task.vocab_size, tuple(self.task.passage_len), self.task.key_prob,
                                 tuple(self.task.answer_len), seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.task.vocab_size, n_segments=2, **dataclasses.asdict(self.model))

    def train_config(self, section: TrainSection) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(section))

    def distill_config(self) -> DistillConfig:
        return DistillConfig(**dataclasses.asdict(self.distill))


def _build(cls, data, where: str, base=None):
    """``cls`` from ``data``, filling unspecified keys from ``base`` (or class defaults)."""
    base = base if base is not None else cls()
    if data is None:
        return base
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {f.name: getattr(base, f.name) for f in fields(cls)}
    for name, value in data.items():
        current = kwargs[name]
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}" if where else name, current)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    # build derived objects once so bad values fail at load time
    cfg.task_spec(), cfg.model_config(), cfg.distill_config()
    for s in (cfg.teacher_train, cfg.distill_train, cfg.compression.phase1, cfg.compression.phase2):
        cfg.train_config(s)
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: {e}") from None
    return from_dict(data)


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
