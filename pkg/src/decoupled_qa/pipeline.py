"""Retriever-reader QA over cached passage states.

Retrieval is exact dot product between the question's pooled vector and the
passages' pooled vectors (both at bottleneck width). The question goes
through the input stack once; each retrieved passage costs one cross-stack
pass over its cached state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import torch

from .cache import CacheReader
from .checkpoint import model_hash
from .data import Batch, Example
from .decoupled import (DecoupledModel, Representation, cross_forward, encode_input,
                        passage_input, question_input)
from .distill import evaluate
from .errors import HashMismatchError
from .transformer import SpanAnswer, passage_bounds, predict_span


@dataclass(frozen=True)
class RetrievalResult:
    passage_id: int
    score: float


@dataclass(frozen=True)
class RankedAnswer:
    passage_id: int | None
    span: SpanAnswer
    text: str
    score: float

    def record(self, question: list[int]) -> dict:
        return {"question": question, "passage_id": self.passage_id,
                "span": [self.span.start, self.span.end], "text": self.text, "score": self.score}


class PassageStore(Protocol):
    ids: list[int]

    def get(self, pid: int) -> Representation: ...

    def pooled_matrix(self) -> torch.Tensor: ...


class OnlineStore:
    """Re-encodes passages on demand; the reference the cache must match."""

    def __init__(self, model: DecoupledModel, corpus: dict[int, dict]):
        self.model = model
        self.corpus = corpus
        self.ids = sorted(corpus)
        self._pooled = None

    def get(self, pid: int) -> Representation:
        with torch.no_grad():
            return encode_input(self.model, passage_input(self.corpus[pid]["token_ids"]), compress=True)

    def pooled_matrix(self) -> torch.Tensor:
        if self._pooled is None:
            self._pooled = torch.stack([self.get(pid).pooled for pid in self.ids])
        return self._pooled


def retrieve(query: torch.Tensor, store: PassageStore, k: int) -> list[RetrievalResult]:
    """Top-k by dot product; ties go to the smaller passage id."""
    pooled = store.pooled_matrix()
    if query.shape[-1] != pooled.shape[-1]:
        raise ValueError(f"query width {query.shape[-1]} != index width {pooled.shape[-1]}")
    scores = (pooled @ query.to(pooled.dtype)).tolist()
    ranked = sorted(zip(store.ids, scores), key=lambda t: (-t[1], t[0]))
    return [RetrievalResult(pid, s) for pid, s in ranked[:k]]


def query_vector(model: DecoupledModel, q_rep: Representation) -> torch.Tensor:
    if model.compression is None:
        return q_rep.pooled
    return model.compression.compress(q_rep.pooled)


def check_hash(model: DecoupledModel, store) -> None:
    expected = getattr(store, "model_hash", None)
    if expected is not None and expected != model_hash(model):
        raise HashMismatchError(
            f"cache was built by model {expected:016x}, serving model is {model_hash(model):016x}")


def span_text(corpus: dict[int, dict], pid: int, question_len: int, span: SpanAnswer) -> str:
    if span.is_no_answer:
        return ""
    words = corpus[pid]["text"].split()
    lo = span.start - (question_len + 2)
    return " ".join(words[lo:span.end - (question_len + 2) + 1])


@torch.no_grad()
def answer_question(model: DecoupledModel, store: PassageStore, corpus: dict[int, dict],
                    question: list[int], k: int) -> list[RankedAnswer]:
    """Ranked answers across the top-k passages.

    Score is best span score minus that passage's no-answer score. Passages
    that abstain are dropped; if all abstain a single no-answer is returned.
    """
    check_hash(model, store)
    q_rep = encode_input(model, question_input(question))
    hits = retrieve(query_vector(model, q_rep), store, k)
    answers = []
    for rank, hit in enumerate(hits):
        p_rep = store.get(hit.passage_id)
        out = cross_forward(model, q_rep, p_rep)
        bounds = passage_bounds(len(question), p_rep.token_count - 1)
        span = predict_span(out.start_logits, out.end_logits, bounds)
        if span.is_no_answer:
            continue
        null = float(out.start_logits[0] + out.end_logits[0])
        answers.append((rank, RankedAnswer(hit.passage_id, span,
                                           span_text(corpus, hit.passage_id, len(question), span),
                                           span.score - null)))
    if not answers:
        return [RankedAnswer(None, SpanAnswer(0, 0, 0.0, True), "", 0.0)]
    answers.sort(key=lambda t: (-t[1].score, t[0]))
    return [a for _, a in answers]


def cached_passage_states(model: DecoupledModel, store: PassageStore):
    """Batch hook for :func:`evaluate`: decompressed cached states padded to the batch."""

    def states(batch: Batch) -> torch.Tensor:
        B, Lp = batch.p_ids.shape
        out = torch.zeros(B, Lp, model.config.d)
        for i, ex in enumerate(batch.examples):
            rep = store.get(ex.passage_id)
            m = rep.matrix
            if rep.compressed:
                m = model.compression.decompress(m)
            out[i, :m.shape[0]] = m
        return out

    return states


def evaluate_cached(model: DecoupledModel, examples: Sequence[Example], store: PassageStore) -> dict:
    """EM/F1 with every passage state taken from ``store`` instead of re-encoded."""
    check_hash(model, store)
    return evaluate(model, examples, passage_states=cached_passage_states(model, store))


def open_cache(path, model: DecoupledModel) -> CacheReader:
    reader = CacheReader(path, compressed=model.compression is not None)
    check_hash(model, reader)
    return reader
