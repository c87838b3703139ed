"""Synthetic key-lookup reading task, dataset files, and batching.

Each example pairs a one-token question ``[k]`` with a passage. With
probability ``key_prob`` the passage holds ``k`` exactly once and the answer
is the run of tokens right after it; otherwise ``k`` is absent and the gold
label is the no-answer span (0, 0). Answer length is a fixed function of the
key, ``lo + (k - 3) % (hi - lo + 1)``, so a reader can infer it from the
question. Solving the task needs question-passage attention, which is the
capability the input stack gives up.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError
from .numeric import Rng
from .transformer import PAD, build_input, passage_bounds
from .decoupled import passage_input, question_input

FIRST_CONTENT_ID = 3


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 48
    passage_len: tuple[int, int] = (12, 24)
    key_prob: float = 0.5
    answer_len: tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "passage_len", tuple(self.passage_len))
        object.__setattr__(self, "answer_len", tuple(self.answer_len))
        lo, hi = self.passage_len
        alo, ahi = self.answer_len
        if self.vocab_size < FIRST_CONTENT_ID + 2:
            raise ConfigError("vocab_size too small for a key plus other content tokens")
        if not (1 <= alo <= ahi):
            raise ConfigError(f"bad answer length range {self.answer_len}")
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad passage length range {self.passage_len}")
        if lo < 1 + ahi:
            raise ConfigError(f"passages of {lo} tokens cannot hold a key plus a {ahi}-token answer")
        if not 0.0 <= self.key_prob <= 1.0:
            raise ConfigError("key_prob must be in [0, 1]")

    def answer_length(self, key: int) -> int:
        lo, hi = self.answer_len
        return lo + (key - FIRST_CONTENT_ID) % (hi - lo + 1)


@dataclass
class Example:
    question: list[int]
    passage_id: int
    passage: list[int]
    gold_start: int  # positions in [CLS] q [SEP] p [SEP]; (0, 0) = no answer
    gold_end: int

    @property
    def is_answerable(self) -> bool:
        return self.gold_start != 0

    def bounds(self) -> tuple[int, int]:
        return passage_bounds(len(self.question), len(self.passage))


def generate_synthetic(spec: SyntheticTaskSpec, n: int, first_passage_id: int = 0) -> list[Example]:
    rng = Rng(spec.seed).child("synthetic")
    n_content = spec.vocab_size - FIRST_CONTENT_ID
    out = []
    for i in range(n):
        g = rng.child(str(i)).generator
        key = int(g.integers(FIRST_CONTENT_ID, spec.vocab_size))
        plen = int(g.integers(spec.passage_len[0], spec.passage_len[1] + 1))
        # content ids other than the key
        draws = g.integers(0, n_content - 1, size=plen) + FIRST_CONTENT_ID
        passage = [int(t + (t >= key)) for t in draws]
        gs = ge = 0
        if g.random() < spec.key_prob:
            alen = spec.answer_length(key)
            at = int(g.integers(0, plen - alen))
            passage[at] = key
            gs = len([key]) + 2 + at + 1
            ge = gs + alen - 1
        out.append(Example([key], first_passage_id + i, passage, gs, ge))
    return out


def token_text(tokens: list[int]) -> str:
    return " ".join(f"w{t}" for t in tokens)


# --------------------------------------------------------------------------
# files


def write_jsonl(path: str | os.PathLike, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {p}")
    out = []
    with open(p, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DataError(f"{p}:{lineno}: {e.msg}") from None
    return out


def corpus_records(examples: list[Example]) -> list[dict]:
    return [{"id": e.passage_id, "token_ids": e.passage, "text": token_text(e.passage)}
            for e in examples]


def dataset_records(examples: list[Example]) -> list[dict]:
    return [{"question_ids": e.question, "passage_id": e.passage_id,
             "gold_start": e.gold_start, "gold_end": e.gold_end} for e in examples]


def save_split(examples: list[Example], dataset_path, corpus_path) -> None:
    write_jsonl(dataset_path, dataset_records(examples))
    write_jsonl(corpus_path, corpus_records(examples))


def load_corpus(path) -> dict[int, dict]:
    corpus = {}
    for r in read_jsonl(path):
        try:
            pid = int(r["id"])
            corpus[pid] = {"token_ids": [int(t) for t in r["token_ids"]], "text": str(r["text"])}
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path}: malformed passage record {r!r}") from None
    return corpus


def load_dataset(path, corpus: dict[int, dict]) -> list[Example]:
    out = []
    for r in read_jsonl(path):
        try:
            pid = int(r["passage_id"])
            ex = Example([int(t) for t in r["question_ids"]], pid, corpus[pid]["token_ids"],
                         int(r["gold_start"]), int(r["gold_end"]))
        except KeyError as e:
            raise DataError(f"{path}: record missing {e} or unknown passage") from None
        out.append(ex)
    return out


# --------------------------------------------------------------------------
# batching


def _pad(rows: list[list[int]], width: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    width = width or max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = 1
    return torch.from_numpy(ids), torch.from_numpy(mask)


@dataclass
class Batch:
    ids: torch.Tensor        # standard layout, (B, Lq + Lp)
    segments: torch.Tensor
    mask: torch.Tensor
    q_ids: torch.Tensor      # [CLS] q [SEP], (B, Lq)
    q_mask: torch.Tensor
    p_ids: torch.Tensor      # p [SEP], (B, Lp)
    p_mask: torch.Tensor
    gold_start: torch.Tensor
    gold_end: torch.Tensor
    examples: list[Example] = field(repr=False)


def make_batch(examples: list[Example]) -> Batch:
    qs = [question_input(e.question) for e in examples]
    ps = [passage_input(e.passage) for e in examples]
    q_ids, q_mask = _pad(qs)
    p_ids, p_mask = _pad(ps)
    width = q_ids.shape[1] + p_ids.shape[1]
    joint = [build_input(e.question, e.passage) for e in examples]
    ids, mask = _pad([j[0] for j in joint], width)
    segs, _ = _pad([j[1] for j in joint], width)
    gold_s = torch.tensor([e.gold_start for e in examples])
    gold_e = torch.tensor([e.gold_end for e in examples])
    return Batch(ids, segs, mask, q_ids, q_mask, p_ids, p_mask, gold_s, gold_e, examples)


def batches(examples: list[Example], size: int, order=None):
    order = range(len(examples)) if order is None else order
    order = list(order)
    for i in range(0, len(order), size):
        yield make_batch([examples[j] for j in order[i:i + size]])


def spec_dict(spec: SyntheticTaskSpec) -> dict:
    d = asdict(spec)
    d["passage_len"], d["answer_len"] = list(spec.passage_len), list(spec.answer_len)
    return d
