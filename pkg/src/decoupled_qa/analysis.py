"""Inference cost model and CPU latency benchmark.

Two FLOPs views:

* ``flops_paper_mode``: fraction of layers still run online, y / (x + y),
  shown truncated to two decimals.
* ``flops_detailed``: per-layer mult-add counts for the standard reader over
  N_p passages versus the decoupled online path (question input stack once,
  cross stack per passage). One mult-add counts as 2 FLOPs; softmax and
  LayerNorm work (O(L*d)) is reported but kept out of the headline ratio.
"""
from __future__ import annotations

import math
import statistics
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import torch

from .decoupled import DecoupledModel, SplitSpec, cross_forward, encode_input, question_input
from .numeric import Rng
from .transformer import ModelConfig, StandardModel, build_input, encode

SCENARIOS = {"long": (64, 448), "short": (16, 150)}


# --------------------------------------------------------------------------
# FLOPs


def online_fraction(x: int, y: int) -> Fraction:
    return Fraction(y, x + y)


def truncate2(frac: Fraction) -> str:
    """Floor to two decimals, formatted like ``.91``; 1 prints as ``1.0``."""
    if frac >= 1:
        return "1.0"
    hundredths = math.floor(frac * 100)
    return f".{hundredths:02d}"


def flops_paper_mode(split: SplitSpec, total_layers: int) -> float:
    """Online fraction y / total, truncated to two decimals."""
    if split.x + split.y != total_layers:
        raise ValueError(f"split {split} does not cover {total_layers} layers")
    return math.floor(online_fraction(split.x, split.y) * 100) / 100


def layer_sweep(total_layers: int) -> list[tuple[str, Fraction, str]]:
    """Baseline plus every split 1-(n-1) ... (n-1)-1, as (label, raw, shown)."""
    rows = [("Baseline", Fraction(1), "1.0")]
    for x in range(1, total_layers):
        frac = online_fraction(x, total_layers - x)
        rows.append((f"{x}-{total_layers - x}", frac, truncate2(frac)))
    return rows


def layer_multadds(cfg: ModelConfig, length: int) -> dict[str, int]:
    d = cfg.d
    return {
        "projections": 4 * length * d * d,
        "attention": 2 * length * length * d,
        "ffn": 2 * length * d * cfg.ffn,
    }


def layer_flops(cfg: ModelConfig, length: int) -> int:
    return 2 * sum(layer_multadds(cfg, length).values())


def layer_elementwise(cfg: ModelConfig, length: int) -> int:
    """Rough softmax + LayerNorm cost, reported separately."""
    return cfg.n_heads * length * length * 3 + 2 * length * cfg.d * 5


@dataclass
class FlopsReport:
    mode: str
    standard_flops: int
    decoupled_online_flops: int
    fraction: float
    breakdown: dict[str, int]            # online stages; sums to decoupled_online_flops
    offline_passage_flops: int
    elementwise_standard: int
    elementwise_online: int
    lower_pairs_standard: int
    lower_pairs_decoupled: int
    lower_pairs_ratio: float
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def flops_detailed(cfg: ModelConfig, x: int, y: int, n_passages: int, q_len: int, p_len: int) -> FlopsReport:
    """Counts for one question read against ``n_passages`` passages.

    x = 0 is accepted here (no split) and reproduces the standard cost.
    """
    if min(n_passages, q_len, p_len) < 1 or x < 0 or y < 0 or x + y < 1:
        raise ValueError("lengths and passage count must be positive")
    L = q_len + p_len
    n = x + y
    standard = n * layer_flops(cfg, L) * n_passages
    q_stack = x * layer_flops(cfg, q_len)
    cross = y * layer_flops(cfg, L) * n_passages
    offline = x * layer_flops(cfg, p_len) * n_passages
    online = q_stack + cross
    pairs_std = n_passages * L * L
    pairs_dec = q_len * q_len + n_passages * p_len * p_len
    return FlopsReport(
        mode="detailed",
        standard_flops=standard,
        decoupled_online_flops=online,
        fraction=online / standard,
        breakdown={"question_input_stack": q_stack, "cross_stack": cross},
        offline_passage_flops=offline,
        elementwise_standard=n * layer_elementwise(cfg, L) * n_passages,
        elementwise_online=x * layer_elementwise(cfg, q_len) + y * layer_elementwise(cfg, L) * n_passages,
        lower_pairs_standard=pairs_std,
        lower_pairs_decoupled=pairs_dec,
        lower_pairs_ratio=pairs_dec / pairs_std,
        params={"x": x, "y": y, "n_passages": n_passages, "q_len": q_len, "p_len": p_len,
                "d": cfg.d, "ffn": cfg.ffn},
    )


def format_sweep(total_layers: int) -> str:
    rows = layer_sweep(total_layers)
    labels = [r[0] for r in rows]
    shown = [r[2] for r in rows]
    widths = [max(len(a), len(b)) for a, b in zip(labels, shown)]
    head = "Split  | " + " | ".join(l.rjust(w) for l, w in zip(labels, widths))
    body = "FLOPs  | " + " | ".join(s.rjust(w) for s, w in zip(shown, widths))
    return head + "\n" + body


def format_detailed(rep: FlopsReport) -> str:
    p = rep.params
    lines = [
        f"split {p['x']}-{p['y']}, N_p={p['n_passages']}, L_q={p['q_len']}, L_p={p['p_len']}, "
        f"d={p['d']}, ffn={p['ffn']}",
        f"  standard          {rep.standard_flops:>18,d} FLOPs",
        f"  decoupled online  {rep.decoupled_online_flops:>18,d} FLOPs  ({rep.fraction:.4f})",
        f"    question input  {rep.breakdown['question_input_stack']:>18,d}",
        f"    cross stack     {rep.breakdown['cross_stack']:>18,d}",
        f"  offline passages  {rep.offline_passage_flops:>18,d}",
        f"  lower-layer attention pairs  {rep.lower_pairs_decoupled:,d} / {rep.lower_pairs_standard:,d}"
        f" = {rep.lower_pairs_ratio:.6f}",
    ]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# wall clock


@dataclass
class BenchRow:
    name: str
    mean_ms: float
    median_ms: float
    diff_pct: float  # (baseline - this) / baseline * 100, from medians


@dataclass
class BenchReport:
    scenario: str
    repeats: int
    rows: list[BenchRow]
    notes: list[str] = field(default_factory=list)
    throughput_qps: dict[str, float] = field(default_factory=dict)

    def row(self, name: str) -> BenchRow:
        return next(r for r in self.rows if r.name == name)

    def to_dict(self) -> dict:
        return asdict(self)


def format_bench(rep: BenchReport) -> str:
    lines = [f"CPU, scenario={rep.scenario}, repeats={rep.repeats} (median ms)",
             f"{'Model':<26}{'median':>10}{'mean':>10}{'diff':>9}"]
    for r in rep.rows:
        diff = "" if r.name == "standard" else f"{r.diff_pct:+.1f}%"
        lines.append(f"{r.name:<26}{r.median_ms:>10.1f}{r.mean_ms:>10.1f}{diff:>9}")
    lines += [f"note: {n}" for n in rep.notes]
    return "\n".join(lines)


def _time(fn, repeats: int) -> list[float]:
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1000.0)
    return out


def bench(standard: StandardModel, decoupled: dict[str, DecoupledModel], scenario: str = "long",
          repeats: int = 8, warmup: int = 2, seed: int = 0, cache_dtype: str = "f16",
          workers: int = 0) -> BenchReport:
    """Median wall time of the standard forward vs each decoupled online path.

    The online path reads the passage from a pre-built cache, encodes the
    question, and runs the cross stack. Runs single-threaded. ``workers > 0``
    adds a threaded throughput measurement that is informational only.
    """
    from .cache import build_index
    from .pipeline import open_cache

    if repeats < 4:
        raise ValueError("repeats must be at least 4")
    q_len, p_len = SCENARIOS[scenario]
    vocab = standard.config.vocab_size
    g = Rng(seed).child(f"bench/{scenario}").generator
    question = [int(t) for t in g.integers(3, vocab, size=q_len)]
    passage = [int(t) for t in g.integers(3, vocab, size=p_len)]
    ids, segs = build_input(question, passage)
    ids_t, segs_t = torch.tensor(ids), torch.tensor(segs)

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    notes = []
    try:
        with tempfile.TemporaryDirectory() as tmp, torch.inference_mode():
            runners = {"standard": lambda: encode(standard, ids_t, segs_t)}
            readers = []
            for name, model in decoupled.items():
                path = Path(tmp) / f"{name}.dtcx"
                build_index(model, [(0, passage)], cache_dtype, path)
                reader = open_cache(path, model)
                readers.append(reader)

                def online(model=model, reader=reader):
                    q = encode_input(model, question_input(question))
                    return cross_forward(model, q, reader.read_entry(0))

                runners[name] = online

            resolution_ms = time.get_clock_info("perf_counter").resolution * 1000.0
            times = {}
            n = repeats
            for name, fn in runners.items():
                _time(fn, warmup)
                t = _time(fn, n)
                while statistics.median(t) < 1000 * resolution_ms and n < 1024:
                    n *= 2
                    notes.append(f"{name}: timer resolution {resolution_ms:.2e} ms too coarse, "
                                 f"repeats raised to {n}")
                    t = _time(fn, n)
                times[name] = t
            throughput = {}
            if workers > 0:
                for name, fn in runners.items():
                    t0 = time.perf_counter()
                    with ThreadPoolExecutor(workers) as pool:
                        list(pool.map(lambda _: fn(), range(repeats)))
                    throughput[name] = repeats / (time.perf_counter() - t0)
            for r in readers:
                r.close()
    finally:
        torch.set_num_threads(prev_threads)

    base = statistics.median(times["standard"])
    rows = []
    for name, t in times.items():
        med = statistics.median(t)
        rows.append(BenchRow(name, statistics.fmean(t), med, (base - med) / base * 100.0))
    return BenchReport(scenario, max(len(t) for t in times.values()), rows, notes, throughput)


def bench_models(layers: int = 12, d: int = 256, heads: int = 4, ffn: int = 1024, split: str = "5-7",
                 compress_factor: int = 4, seed: int = 0, vocab: int = 1000):
    """Randomly initialised models for timing (weights do not affect cost)."""
    from .compression import attach_compression
    from .decoupled import split_model
    from .transformer import init_standard

    q, p = SCENARIOS["long"]
    cfg = ModelConfig(n_layers=layers, d=d, n_heads=heads, ffn=ffn, vocab_size=vocab,
                      max_positions=q + p + 3, dropout=0.1, attention_dropout=0.1)
    standard = init_standard(cfg, seed)
    spec = SplitSpec.parse(split)
    plain = split_model(standard, spec)
    squeezed = attach_compression(split_model(standard, spec), d // compress_factor, seed)
    return standard, {f"decoupled {spec}": plain, f"decoupled {spec} +{compress_factor}x": squeezed}
