"""Command line entry point.

Every subcommand prints JSON or writes CSV files. The exit status is 1 when an
invariant assertion fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (LATENCY_HEADER, LENGTH_HEADER, STORAGE_HEADER, THROUGHPUT_HEADER, ExperimentGrid,
                          deviation_reduction, latency_stack_rows, length_sweep, make_model, replay_storage,
                          run_grid, selection_bias, storage_rows, throughput_sweep, write_csv)
from .kv_store import CapacityError, KVFormatError, KVStore, Tier, TierConfig
from .pipeline import CostModel, ServingPipeline, build_pipeline, to_ticks
from .preprocessing import PreprocessConfig, SystemPromptKV
from .reprocessing import MODES, kv_deviation
from .retrieval import KnowledgeBase, detokenize, load_corpus_jsonl, write_corpus_jsonl
from .scheduler import SchedulerConfig, run_async, run_sync
from .synthetic import (CorpusSpec, StorageWorkloadSpec, gen_synthetic_corpus, poisson_workload,
                        read_workload_jsonl, storage_workload, write_qa_jsonl, write_workload_jsonl)

STORE_META = "meta.json"
DEVIATION_CSV_HEADER = ["token_index", "chunk_id", "layer", "k_dev", "v_dev"]
SUMMARY_HEADER = ["request_id", "ttft_ticks", "load_ticks", "prefill_ticks"]


class UsageError(Exception):
    """Bad inputs that are not invariant failures; exit status 2."""


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x)


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x)


def _corpus_spec(args) -> CorpusSpec:
    return CorpusSpec(clusters=args.clusters, chunks_per_cluster=args.chunks_per_cluster, max_hops=args.max_hops,
                      distractors=args.distractors, questions=args.questions)


def _add_corpus_flags(p: argparse.ArgumentParser, questions: int = 200) -> None:
    p.add_argument("--clusters", type=int, default=10)
    p.add_argument("--chunks-per-cluster", type=int, default=10)
    p.add_argument("--max-hops", type=int, default=3)
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--questions", type=int, default=questions)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_pipeline(args) -> ServingPipeline:
    d = Path(args.store_dir)
    meta = json.loads((d / STORE_META).read_text())
    model = make_model(args.model_config or meta["model"])
    if model.checksum() != meta["model_checksum"]:
        raise UsageError(f"store in {d} was built with a different model")
    chunks = load_corpus_jsonl(d / "corpus.jsonl", meta.get("window"))
    stores, system = {}, None
    for name in ("isolated", "fused"):
        if (d / name / "manifest.json").exists():
            stores[name], tokens, kv = KVStore.load(d / name, TierConfig())
            if tokens is not None:
                system = SystemPromptKV(tokens, kv)
    return ServingPipeline(model, KnowledgeBase(chunks), system, stores, args.top_chunks,
                           getattr(args, "max_new_tokens", 1))


def cmd_gen_corpus(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chunks, qa = gen_synthetic_corpus(_corpus_spec(args), args.seed)
    write_corpus_jsonl(chunks, out / "corpus.jsonl")
    write_qa_jsonl(qa, out / "qa.jsonl")
    _emit({"chunks": len(chunks), "questions": len(qa), "corpus": str(out / "corpus.jsonl"),
           "qa": str(out / "qa.jsonl")})


def cmd_preprocess(args) -> None:
    d = Path(args.store_dir)
    d.mkdir(parents=True, exist_ok=True)
    chunks = load_corpus_jsonl(args.corpus, args.window)
    model_spec = args.model_config or "binding"
    model = make_model(model_spec)
    cfg = PreprocessConfig(top_n=args.top_n, workers=args.workers)
    pipe, reports = build_pipeline(chunks, model, cfg, fused=not args.isolated_only)
    write_corpus_jsonl(chunks, d / "corpus.jsonl")
    for name, store in pipe.stores.items():
        store.check_single_copy()
        store.save(d / name, pipe.system.tokens, pipe.system.kv)
    meta = {"model": model_spec, "model_checksum": model.checksum(), "window": args.window, "top_n": args.top_n}
    (d / STORE_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    report = {name: r.as_dict() for name, r in reports.items()}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)


def cmd_query(args) -> None:
    if (args.question is None) == (args.question_file is None):
        raise UsageError("give either a question or --question-file")
    question = args.question if args.question is not None else Path(args.question_file).read_text().strip()
    pipe = _load_pipeline(args)
    ctx = pipe.context(question)
    out = pipe.execute(question, args.mode, args.ratio, ctx)
    timing = {**out.timing.as_dict(),
              "ttft_ticks": to_ticks(CostModel().seconds(pipe.cost(args.mode, ctx, out).token_layers))}
    if args.emit_deviation:
        dev = kv_deviation(ctx, pipe.store_for(args.mode), pipe.system, pipe.model)
        rows = [{"token_index": ctx.n_system + i, "chunk_id": ctx.chunk_ids[int(c)], "layer": layer,
                 "k_dev": dev.delta[ctx.n_system + i, layer, 0], "v_dev": dev.delta[ctx.n_system + i, layer, 1]}
                for i, c in enumerate(ctx.chunk_of_row) for layer in range(pipe.model.cfg.layers)]
        write_csv(rows, args.emit_deviation, DEVIATION_CSV_HEADER)
    if args.emit_timing:
        Path(args.emit_timing).write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    _emit({"question": question, "mode": args.mode, "ratio": args.ratio,
           "answer": detokenize(out.answer), "chunks": list(ctx.chunk_ids), "timing": timing})


def cmd_cache_stats(args) -> None:
    d = Path(args.store_dir)
    stats = {}
    for name in ("isolated", "fused"):
        if (d / name / "manifest.json").exists():
            store, _, _ = KVStore.load(d / name, TierConfig())
            store.check_single_copy()
            stats[name] = store.stats()
    if not stats:
        raise UsageError(f"no stores under {d}")
    _emit(stats)


def cmd_grid(args) -> None:
    grid = ExperimentGrid(modes=tuple(args.modes.split(",")), ratios=_floats(args.ratios),
                          seeds=_ints(args.seeds) if args.seeds else (args.seed,), corpus=_corpus_spec(args),
                          model=args.model_config or "binding", top_chunks=args.top_chunks, top_n=args.top_n)
    res = run_grid(grid, args.out)
    failures = sum(r["failures"] for r in res.quality)
    _emit({"out": args.out, "cells": len(res.quality), "failures": failures})


def cmd_bench(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = _corpus_spec(args)
    model_spec = args.model_config or "random"
    if args.top_chunks is None:
        args.top_chunks = 10 if args.experiment == "deviation" else 4
    summary: dict = {}
    if args.experiment == "deviation":
        rep = deviation_reduction(spec, args.seed, model_spec, context_chunks=args.top_chunks)
        rows = [{"query": i, "isolated": a, "fused": b} for i, (a, b) in enumerate(zip(rep.isolated, rep.fused))]
        write_csv(rows, out / "deviation.csv", ["query", "isolated", "fused"])
        summary = {"isolated_mean": float(rep.isolated.mean()), "fused_mean": float(rep.fused.mean()),
                   "reduction": rep.reduction}
        assert rep.fused.mean() < rep.isolated.mean(), "fused stitching did not reduce the deviation"
    elif args.experiment == "selection":
        rep = selection_bias(spec, args.seed, model_spec, args.ratio, args.top_chunks)
        rows = [{"selector": name, "bin": b, "count": int(c)}
                for name, h in (("cacheblend", rep.cacheblend), ("query_guided", rep.query_guided))
                for b, c in enumerate(h)]
        write_csv(rows, out / "selection_bias.csv", ["selector", "bin", "count"])
        summary = {"chi2_cacheblend": rep.chi2_cacheblend, "chi2_query_guided": rep.chi2_query_guided}
    elif args.experiment == "storage":
        contexts, known = storage_workload(StorageWorkloadSpec(queries=args.queries), args.seed)
        rep = replay_storage(contexts, known)
        write_csv(storage_rows(rep), out / "storage.csv", STORAGE_HEADER)
        summary = rep.as_dict()
    elif args.experiment == "schedule":
        summary = _bench_schedule(args, out)
    elif args.experiment in ("throughput", "latency", "length"):
        chunks, qa = gen_synthetic_corpus(spec, args.seed)
        tiers = TierConfig(gpu_capacity=args.gpu_capacity, cpu_capacity=args.cpu_capacity, disk_bandwidth=args.disk_bandwidth)
        pipe, _ = build_pipeline(chunks, make_model(args.model_config or "binding"), fused=True,
                                 top_chunks=args.top_chunks, tiers=tiers)
        questions = [ex.question for ex in qa]
        if args.experiment == "throughput":
            rows = throughput_sweep(pipe, questions, _floats(args.rates), SchedulerConfig(), args.mode, args.ratio,
                                    args.seed)
            write_csv(rows, out / "throughput.csv", THROUGHPUT_HEADER)
            summary = {"rows": len(rows)}
        elif args.experiment == "latency":
            if args.workload:
                wl = read_workload_jsonl(args.workload)
            else:
                wl = poisson_workload(questions, _floats(args.rates)[0], args.seed, args.mode, args.ratio)
                write_workload_jsonl(wl, out / "workload.jsonl")
            for name, runner in (("async", run_async), ("sync", run_sync)):
                tr = runner(wl, pipe)
                write_csv(latency_stack_rows(tr), out / f"latency_{name}.csv", LATENCY_HEADER)
                (out / f"trace_{name}.json").write_text(tr.to_json() + "\n")
                summary[name] = {"makespan": tr.makespan, "idle_fraction": tr.idle_fraction}
        else:
            rows = length_sweep(pipe, questions[0], range(1, args.top_chunks + 1), args.ratio)
            write_csv(rows, out / "length_sweep.csv", LENGTH_HEADER)
            summary = {"rows": len(rows)}
    _emit({"experiment": args.experiment, "out": str(out), **summary})


def _tiers(args) -> TierConfig:
    caps = [None if c in ("", "none") else int(float(c)) for c in args.tier_capacities.split(",")]
    bws = _floats(args.tier_bandwidths)
    if len(caps) != 2 or len(bws) != 2:
        raise UsageError("--tier-capacities takes gpu,cpu and --tier-bandwidths takes cpu,disk")
    return TierConfig(gpu_capacity=caps[0], cpu_capacity=caps[1], cpu_bandwidth=bws[0], disk_bandwidth=bws[1])


def _per_kind(path: str, kind: str, n_kinds: int) -> Path:
    """``trace.json`` becomes ``trace.async.json`` when both schedulers run."""
    p = Path(path)
    return p if n_kinds == 1 else p.with_name(f"{p.stem}.{kind}{p.suffix}")


def _bench_schedule(args, out: Path) -> dict:
    """Replay a workload file against a saved store under the given tiers."""
    if not args.workload:
        raise UsageError("the schedule experiment needs --workload")
    wl = read_workload_jsonl(args.workload)
    pipe = _load_pipeline(args).with_tiers(_tiers(args), None if args.start_tier == "top" else Tier[args.start_tier.upper()])
    config = SchedulerConfig(batch_max_tokens=args.batch_max)
    kinds = [k for k in ("async", "sync") if getattr(args, k)] or ["async", "sync"]
    summary, answers = {}, []
    for kind in kinds:
        tr = (run_async if kind == "async" else run_sync)(wl, pipe, config)
        answers.append(tr.answers())
        tr.check_work_conservation()
        tr.check_accounting()
        if args.trace_out:
            _per_kind(args.trace_out, kind, len(kinds)).write_text(tr.to_json() + "\n")
        if args.summary_out:
            write_csv(tr.summary_rows(), _per_kind(args.summary_out, kind, len(kinds)), SUMMARY_HEADER)
        else:
            write_csv(tr.summary_rows(), out / f"schedule_{kind}.csv", SUMMARY_HEADER)
        summary[kind] = {"makespan_ticks": to_ticks(tr.makespan), "idle_fraction": tr.idle_fraction,
                         "requests": len(tr.requests)}
    assert all(a == answers[0] for a in answers), "schedulers disagree on answers"
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chunkreuse", description="Chunk KV reuse for retrieval-augmented prefill.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-config", default=None,
                   help="binding | random | path to a ModelConfig JSON | checkpoint file")
    p.add_argument("--store-dir", default="store")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus.jsonl and qa.jsonl")
    g.add_argument("--out", required=True)
    _add_corpus_flags(g)
    g.set_defaults(func=cmd_gen_corpus)

    pp = sub.add_parser("preprocess", help="build isolated and fused KV stores for a corpus")
    pp.add_argument("--corpus", required=True, help="JSON-lines file with a text field per line")
    pp.add_argument("--window", type=int, default=None, help="split texts into token windows of this size")
    pp.add_argument("--top-n", type=int, default=10)
    pp.add_argument("--workers", type=int, default=1)
    pp.add_argument("--isolated-only", "--no-fused", dest="isolated_only", action="store_true",
                    help="skip the fused store")
    pp.add_argument("--fused", dest="isolated_only", action="store_false", help="build the fused store (default)")
    pp.add_argument("--out", dest="store_dir", default=argparse.SUPPRESS, help="alias of the global --store-dir")
    pp.add_argument("--report", default=None, help="also write the timing and size summary JSON here")
    pp.set_defaults(func=cmd_preprocess)

    q = sub.add_parser("query", help="answer one question from a preprocessed store")
    q.add_argument("question", nargs="?", default=None)
    q.add_argument("--question-file", default=None)
    q.add_argument("--mode", choices=MODES, default="fusionrag")
    q.add_argument("--ratio", type=float, default=0.15)
    q.add_argument("--top-chunks", type=int, default=4)
    q.add_argument("--max-new-tokens", type=int, default=1)
    q.add_argument("--emit-deviation", default=None, help="CSV of per-token per-layer K/V deviation")
    q.add_argument("--emit-timing", default=None, help="JSON timing breakdown")
    q.set_defaults(func=cmd_query)

    c = sub.add_parser("cache-stats", help="tier occupancy and record counts of a saved store")
    c.set_defaults(func=cmd_cache_stats)

    gr = sub.add_parser("grid", help="quality and TTFT over modes, ratios and seeds")
    gr.add_argument("--out", required=True)
    gr.add_argument("--modes", default=",".join(MODES))
    gr.add_argument("--ratios", default="0,0.05,0.10,0.15,1.0")
    gr.add_argument("--seeds", default="", help="comma separated; defaults to --seed")
    gr.add_argument("--top-chunks", type=int, default=4)
    gr.add_argument("--top-n", type=int, default=10)
    _add_corpus_flags(gr)
    gr.set_defaults(func=cmd_grid)

    b = sub.add_parser("bench", help="single experiments that emit one CSV each")
    b.add_argument("experiment",
                   choices=("schedule", "deviation", "selection", "storage", "throughput", "latency", "length"))
    b.add_argument("--out", required=True)
    b.add_argument("--mode", choices=MODES, default="fusionrag")
    b.add_argument("--ratio", type=float, default=0.15)
    b.add_argument("--top-chunks", type=int, default=None, help="default 10 for deviation, else 4")
    b.add_argument("--queries", type=int, default=1000, help="storage replay length")
    b.add_argument("--rates", default="5,20,80", help="arrival rates in requests per virtual second")
    b.add_argument("--gpu-capacity", type=int, default=None)
    b.add_argument("--cpu-capacity", type=int, default=None)
    b.add_argument("--disk-bandwidth", type=float, default=1e9)
    b.add_argument("--workload", default=None,
                   help="JSON-lines requests {arrival_tick, question, mode, ratio}; required by schedule")
    b.add_argument("--tier-capacities", default="none,none", help="schedule: gpu,cpu bytes ('none' = unbounded)")
    b.add_argument("--tier-bandwidths", default="16e9,1e9", help="schedule: cpu,disk bytes per second")
    b.add_argument("--start-tier", choices=("top", "gpu", "cpu", "disk"), default="top",
                   help="schedule: where records sit before the first request")
    b.add_argument("--async", dest="async", action="store_true", help="schedule: asynchronous scheduler only")
    b.add_argument("--sync", dest="sync", action="store_true", help="schedule: synchronous scheduler only")
    b.add_argument("--batch-max", type=int, default=4096, help="schedule: token cap per engine step")
    b.add_argument("--trace-out", default=None, help="schedule: JSON trace path")
    b.add_argument("--summary-out", default=None, help="schedule: CSV of request_id,ttft_ticks,load_ticks,prefill_ticks")
    _add_corpus_flags(b, questions=60)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except AssertionError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 1
    except (UsageError, CapacityError, KVFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
