"""Command-line entry point: ``decoupled-qa <subcommand> [options]``.

Every subcommand works inside one run directory (``--out``, default
``runs/default``) and writes the resolved config there as
``config.resolved.yaml``. Exit codes: 0 ok, 2 config error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import checkpoint
from . import config as cfgmod
from .analysis import (SCENARIOS, bench, bench_models, flops_detailed, format_bench, format_detailed,
                       format_sweep)
from .cache import build_index
from .compression import attach_compression, train_two_phase
from .data import (corpus_records, dataset_records, generate_synthetic, load_corpus, load_dataset, spec_dict,
                   write_jsonl)
from .decoupled import DecoupledModel, SplitSpec, split_model
from .distill import evaluate, train_decoupled, train_standard
from .errors import ConfigError, DataError, NumericError
from .pipeline import answer_question, evaluate_cached, open_cache
from .transformer import ModelConfig, StandardModel, init_standard

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

TRAIN, EVAL = "train", "eval"


class Run:
    """Paths inside a run directory."""

    def __init__(self, out: str | Path):
        self.dir = Path(out)

    def __getattr__(self, name):
        files = {
            "train": "data/train.jsonl", "eval": "data/eval.jsonl", "corpus": "data/corpus.jsonl",
            "task": "data/task.json", "teacher": "teacher.dtmw", "student_init": "student_init.dtmw",
            "student": "student.dtmw", "compressed": "compressed.dtmw", "cache": "cache.dtcx",
            "metrics": "metrics.json",
        }
        if name not in files:
            raise AttributeError(name)
        return self.dir / files[name]


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(run: Run, split: str):
    corpus = load_corpus(run.corpus)
    return load_dataset(getattr(run, split), corpus)


def _load_kind(path, kind):
    model = checkpoint.load(path)
    if not isinstance(model, kind):
        want = "decoupled" if kind is DecoupledModel else "standard"
        raise DataError(f"{path}: expected a {want} checkpoint")
    return model


def _parse_question(text: str) -> list[int]:
    out = []
    for tok in text.replace(",", " ").split():
        tok = tok[1:] if tok.startswith("w") else tok
        try:
            out.append(int(tok))
        except ValueError:
            raise ConfigError(f"question token {tok!r} is not an id (use '7' or 'w7')") from None
    if not out:
        raise ConfigError("empty question")
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, run, args):
    train = generate_synthetic(cfg.task_spec(TRAIN), cfg.task.n_train)
    ev = generate_synthetic(cfg.task_spec(EVAL), cfg.task.n_eval, first_passage_id=cfg.task.n_train)
    (run.dir / "data").mkdir(parents=True, exist_ok=True)
    write_jsonl(run.train, dataset_records(train))
    write_jsonl(run.eval, dataset_records(ev))
    write_jsonl(run.corpus, corpus_records(train + ev))
    _dump_json(run.task, {TRAIN: spec_dict(cfg.task_spec(TRAIN)), EVAL: spec_dict(cfg.task_spec(EVAL))})
    print(f"wrote {len(train)} train / {len(ev)} eval examples to {run.dir / 'data'}")
    return {}


def cmd_train_teacher(cfg, run, args):
    train, ev = _load_split(run, TRAIN), _load_split(run, EVAL)
    model = init_standard(cfg.model_config(), cfg.seed)
    trace = train_standard(model, train, cfg.train_config(cfg.teacher_train), ev,
                           run.dir / "teacher_trace.jsonl")
    checkpoint.save(model, run.teacher)
    print(f"teacher: {trace[-1] if trace else evaluate(model, ev)}")
    return {"teacher": evaluate(model, ev)}


def cmd_decouple(cfg, run, args):
    teacher = _load_kind(args.teacher or run.teacher, StandardModel)
    spec = SplitSpec.parse(args.split or cfg.split)
    if spec.x + spec.y != teacher.config.n_layers:
        raise ConfigError(f"split {spec} does not cover the teacher's {teacher.config.n_layers} layers")
    student = split_model(teacher, spec)
    checkpoint.save(student, run.student_init)
    print(f"student {spec} written to {run.student_init}")
    return {}


def cmd_distill(cfg, run, args):
    teacher = _load_kind(run.teacher, StandardModel)
    student = _load_kind(run.student_init, DecoupledModel)
    train, ev = _load_split(run, TRAIN), _load_split(run, EVAL)
    train_decoupled(teacher, student, train, cfg.distill_config(), cfg.train_config(cfg.distill_train),
                    ev, run.dir / "distill_trace.jsonl")
    checkpoint.save(student, run.student)
    res = evaluate(student, ev)
    print(f"student: {res}")
    return {"student": res}


def cmd_compress(cfg, run, args):
    teacher = _load_kind(run.teacher, StandardModel)
    model = _load_kind(run.student, DecoupledModel)
    cc = cfg.compression
    attach_compression(model, cc.dim, cfg.seed)
    train, ev = _load_split(run, TRAIN), _load_split(run, EVAL)
    train_two_phase(model, teacher, train, cfg.distill_config(), cfg.train_config(cc.phase1),
                    cfg.train_config(cc.phase2), ev, cc.skip_phase1, cc.skip_phase2,
                    run.dir / "compress_trace.jsonl")
    checkpoint.save(model, run.compressed)
    res = evaluate(model, ev)
    print(f"compressed (c={cc.dim}): {res}")
    return {"compressed": res}


def _served_model(run, args):
    path = Path(args.model) if args.model else (run.compressed if run.compressed.exists() else run.student)
    return path, _load_kind(path, DecoupledModel)


def cmd_index(cfg, run, args):
    path, model = _served_model(run, args)
    corpus = load_corpus(run.corpus)
    out = Path(args.cache) if args.cache else run.cache
    summary = build_index(model, [(pid, corpus[pid]["token_ids"]) for pid in sorted(corpus)],
                          cfg.cache.dtype, out)
    print(f"indexed {summary.entries} passages from {path.name}: {summary.total_bytes:,d} bytes "
          f"(c={summary.c}, {summary.dtype})")
    return {}


def cmd_ask(cfg, run, args):
    _, model = _served_model(run, args)
    corpus = load_corpus(run.corpus)
    question = _parse_question(args.question)
    with open_cache(Path(args.cache) if args.cache else run.cache, model) as reader:
        answers = answer_question(model, reader, corpus, question, args.k or cfg.ask.k)
    for a in answers:
        if a.passage_id is None:
            print("no answer")
        else:
            print(f"passage {a.passage_id}  span {a.span.start}-{a.span.end}  score {a.score:.3f}  {a.text}")
    return {}


def cmd_eval(cfg, run, args):
    _, model = _served_model(run, args)
    ev = _load_split(run, EVAL)
    if args.online:
        res = evaluate(model, ev)
    else:
        with open_cache(Path(args.cache) if args.cache else run.cache, model) as reader:
            res = evaluate_cached(model, ev, reader)
    print(json.dumps(res, sort_keys=True))
    return {}


def cmd_flops(cfg, run, args):
    if args.sweep:
        print(format_sweep(args.layers))
        return {}
    spec = SplitSpec.parse(args.split or cfg.split)
    mc = cfg.model_config()
    mc = ModelConfig(**{**mc.to_dict(), "n_layers": spec.x + spec.y,
                        **({"d": args.d} if args.d else {}), **({"ffn": args.ffn} if args.ffn else {})})
    q_len, p_len = SCENARIOS[args.scenario] if args.scenario else (args.q_len, args.p_len)
    rep = flops_detailed(mc, spec.x, spec.y, args.n_passages, q_len, p_len)
    print(format_detailed(rep))
    return {}


def cmd_bench(cfg, run, args):
    b = cfg.bench
    torch.set_num_threads(1)
    standard, decoupled = bench_models(b.layers, b.d, b.n_heads, b.ffn, b.split, b.compress_factor, cfg.seed)
    rep = bench(standard, decoupled, args.scenario or b.scenario, args.repeats or b.repeats, seed=cfg.seed,
                cache_dtype=cfg.cache.dtype)
    print(format_bench(rep))
    _dump_json(run.dir / "bench.json", rep.to_dict())
    return {}


def cmd_repro(cfg, run, args):
    """gen-data -> train-teacher -> decouple -> distill -> compress -> index -> eval."""
    metrics = {"seed": cfg.seed, "split": cfg.split}
    cmd_gen_data(cfg, run, args)
    metrics.update(cmd_train_teacher(cfg, run, args))
    args.teacher, args.split = None, None
    cmd_decouple(cfg, run, args)
    metrics.update(cmd_distill(cfg, run, args))
    metrics.update(cmd_compress(cfg, run, args))
    args.model, args.cache = None, None
    cmd_index(cfg, run, args)
    model = _load_kind(run.compressed, DecoupledModel)
    with open_cache(run.cache, model) as reader:
        metrics["compressed_cached"] = evaluate_cached(model, _load_split(run, EVAL), reader)
    metrics["model_hash"] = f"{checkpoint.model_hash(model):016x}"
    _dump_json(run.metrics, metrics)
    print(f"metrics written to {run.metrics}")
    return metrics


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic train/eval sets and passage corpus"),
    "train-teacher": (cmd_train_teacher, "train the standard reader"),
    "decouple": (cmd_decouple, "split the teacher into an input stack and a cross stack"),
    "distill": (cmd_distill, "distil the teacher into the decoupled student"),
    "compress": (cmd_compress, "add a bottleneck to the student and train it in two phases"),
    "index": (cmd_index, "encode the corpus offline into a cache file"),
    "ask": (cmd_ask, "answer one question against the cache"),
    "eval": (cmd_eval, "EM/F1 of the served model on the eval split"),
    "flops": (cmd_flops, "inference cost model"),
    "bench": (cmd_bench, "CPU latency benchmark"),
    "repro": (cmd_repro, "run the whole workflow and write metrics.json"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (unknown keys are rejected)")
    common.add_argument("--out", default="runs/default", help="run directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--print-defaults", action="store_true", help="print the default config and exit")

    parser = argparse.ArgumentParser(prog="decoupled-qa", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs = {name: sub.add_parser(name, help=help_, parents=[common]) for name, (_, help_) in COMMANDS.items()}

    subs["decouple"].add_argument("--split", help="x-y, e.g. 2-2 (default from config)")
    subs["decouple"].add_argument("--teacher", help="teacher checkpoint (default <out>/teacher.dtmw)")
    for name in ("index", "ask", "eval"):
        subs[name].add_argument("--model", help="decoupled checkpoint (default compressed, else student)")
        subs[name].add_argument("--cache", help="cache file (default <out>/cache.dtcx)")
    subs["ask"].add_argument("question", help="token ids, e.g. '7' or 'w7'")
    subs["ask"].add_argument("-k", type=int, help="passages to read")
    subs["eval"].add_argument("--online", action="store_true", help="re-encode passages instead of using the cache")
    f = subs["flops"]
    f.add_argument("--layers", type=int, default=12)
    f.add_argument("--sweep", action="store_true", help="share of layers run online, for every split")
    f.add_argument("--split")
    f.add_argument("--n-passages", type=int, default=10)
    f.add_argument("--q-len", type=int, default=16)
    f.add_argument("--p-len", type=int, default=150)
    f.add_argument("--scenario", choices=sorted(SCENARIOS))
    f.add_argument("--d", type=int)
    f.add_argument("--ffn", type=int)
    subs["bench"].add_argument("--scenario", choices=sorted(SCENARIOS))
    subs["bench"].add_argument("--repeats", type=int)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.print_defaults:
            sys.stdout.write(cfgmod.dump(cfgmod.from_dict({})))
            return 0
        if not args.command:
            parser.print_help()
            return EXIT_CONFIG
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg = cfgmod.from_dict(cfgmod.to_dict(cfg))
        out = Run(args.out)
        out.dir.mkdir(parents=True, exist_ok=True)
        (out.dir / "config.resolved.yaml").write_text(cfgmod.dump(cfg))
        torch.set_num_threads(1)
        COMMANDS[args.command][0](cfg, out, args)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
