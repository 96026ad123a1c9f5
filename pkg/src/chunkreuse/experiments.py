"""Experiment orchestration and CSV emitters.

Every CSV written here depends only on seeds and configuration: floats are
printed with fixed precision and no wall-clock values are included, so reruns
are byte-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .circuits import build_binding_model
from .kv_store import KVStore
from .metrics import UNDEFINED, exact_match, f1_score, normalized_f1
from .model import LayeredKV, ModelConfig, init_model, load_checkpoint
from .pipeline import TICKS_PER_SECOND, CostModel, ServingPipeline, build_pipeline, request_cost, to_ticks
from .preprocessing import PreprocessConfig
from .reprocessing import (CACHEBLEND_LAYER, MODES, budget, kv_deviation, select_cacheblend,
                           select_query_guided)
from .retrieval import Chunk, detokenize
from .scheduler import SchedulerConfig, run_async, run_sync
from .synthetic import PROMPT_TEMPLATE, CorpusSpec, gen_synthetic_corpus, poisson_workload

DEFAULT_RATIOS = (0.0, 0.05, 0.10, 0.15, 1.0)
QUANTILES = tuple(round(q, 2) for q in np.linspace(0.0, 1.0, 21))


def make_model(spec: str = "binding"):
    """``binding``, ``random``, a JSON file of ModelConfig fields, or a checkpoint path."""
    if spec == "binding":
        return build_binding_model()
    if spec == "random":
        return init_model(ModelConfig())
    path = Path(spec)
    if path.suffix == ".json":
        return init_model(ModelConfig(**json.loads(path.read_text())))
    return load_checkpoint(path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def write_csv(rows: list[dict], path, header: list[str] | None = None) -> None:
    header = header or (list(rows[0]) if rows else [])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in header})


# -- quality grid ----------------------------------------------------------

@dataclass(frozen=True)
class ExperimentGrid:
    modes: tuple = MODES
    ratios: tuple = DEFAULT_RATIOS
    seeds: tuple = (0, 1, 2)
    corpus: CorpusSpec = CorpusSpec()
    model: str = "binding"
    top_chunks: int = 4
    top_n: int = 10
    hist_bins: int = 10

    def __post_init__(self) -> None:
        if any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise ValueError("ratios must lie in [0, 1]")
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ValueError(f"unknown modes {sorted(unknown)}")


QUALITY_HEADER = ["mode", "ratio", "seed", "queries", "failures", "em", "f1", "norm_f1", "ttft_ticks",
                  "recomputed_tokens"]
HIST_HEADER = ["mode", "ratio", "seed", "bin", "count"]
DEVIATION_HEADER = ["seed", "variant", "quantile", "deviation"]


@dataclass
class GridResult:
    quality: list = field(default_factory=list)
    histograms: list = field(default_factory=list)
    deviations: list = field(default_factory=list)
    predictions: list = field(default_factory=list)

    def write(self, out_dir, grid: ExperimentGrid | None = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"quality": out / "quality.csv", "selection_hist": out / "selection_hist.csv",
                 "deviation_cdf": out / "deviation_cdf.csv", "predictions": out / "predictions.csv"}
        write_csv(self.quality, paths["quality"], QUALITY_HEADER)
        write_csv(self.histograms, paths["selection_hist"], HIST_HEADER)
        write_csv(self.deviations, paths["deviation_cdf"], DEVIATION_HEADER)
        write_csv(self.predictions, paths["predictions"], ["seed", "qid", "hops", "mode", "ratio", "pred", "gold"])
        if grid is not None:
            paths["metadata"] = out / "metadata.json"
            meta = {"grid": asdict(grid), "prompt_template": PROMPT_TEMPLATE, "cost_model": asdict(CostModel())}
            paths["metadata"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return paths

    def mean_f1(self, mode: str, ratio: float, seed: int) -> float:
        for r in self.quality:
            if r["mode"] == mode and r["seed"] == seed and abs(r["ratio"] - ratio) < 1e-12:
                return r["f1"]
        raise KeyError((mode, ratio, seed))


def position_histogram(crit_sets, bins: int = 10) -> np.ndarray:
    """Counts of selected tokens by relative position inside their chunk."""
    h = np.zeros(bins, np.int64)
    for ctx, crit in crit_sets:
        for i, offs in crit.per_chunk.items():
            n = ctx.chunk_lengths[i]
            for o in offs:
                h[min(bins - 1, int(o) * bins // n)] += 1
    return h


def chi2_to_uniform(hist) -> float:
    """Pearson chi-square against a flat histogram, divided by the sample count."""
    h = np.asarray(hist, dtype=np.float64)
    n = h.sum()
    if n == 0:
        return 0.0
    e = n / len(h)
    return float(((h - e) ** 2 / e).sum() / n)


def _runs(grid: ExperimentGrid):
    """(mode, ratio) cells executed per seed; the two baselines run once at their natural ratio."""
    cells = [("fa", 1.0), ("fr", 0.0)]
    for m in grid.modes:
        if m in ("cacheblend", "fusionrag"):
            cells.extend((m, float(r)) for r in grid.ratios)
    return cells


def run_grid(grid: ExperimentGrid, out_dir=None, cost: CostModel = CostModel()) -> GridResult:
    model = make_model(grid.model)
    res = GridResult()
    for seed in grid.seeds:
        chunks, qa = gen_synthetic_corpus(grid.corpus, seed)
        pipe, _ = build_pipeline(chunks, model, PreprocessConfig(top_n=grid.top_n), top_chunks=grid.top_chunks)
        cells = _runs(grid)
        scores = {c: {"em": [], "f1": [], "ticks": [], "rec": [], "fail": 0} for c in cells}
        selections = {c: [] for c in cells}
        for ex in qa:
            ctx = pipe.context(ex.question)
            for mode, ratio in cells:
                acc = scores[(mode, ratio)]
                try:
                    out = pipe.execute(ex.question, mode, ratio, ctx)
                except Exception:  # noqa: BLE001 - failures are counted and reported per cell
                    acc["fail"] += 1
                    continue
                pred = detokenize(out.answer)
                acc["em"].append(exact_match(pred, ex.answers))
                acc["f1"].append(f1_score(pred, ex.answers))
                acc["ticks"].append(to_ticks(cost.seconds(pipe.cost(mode, ctx, out).token_layers)))
                acc["rec"].append(out.timing.recomputed_tokens)
                if out.critical is not None:
                    selections[(mode, ratio)].append((ctx, out.critical))
                res.predictions.append({"seed": seed, "qid": ex.qid, "hops": ex.hops, "mode": mode,
                                        "ratio": float(ratio), "pred": pred, "gold": ex.answers[0]})
        mean = {c: (float(np.mean(v["f1"])) if v["f1"] else 0.0) for c, v in scores.items()}
        f1_fa, f1_fr = mean[("fa", 1.0)], mean[("fr", 0.0)]
        for mode, ratio in cells:
            if mode not in grid.modes:
                continue
            v = scores[(mode, ratio)]
            res.quality.append({
                "mode": mode, "ratio": float(ratio), "seed": seed, "queries": len(qa), "failures": v["fail"],
                "em": float(np.mean(v["em"])) if v["em"] else 0.0, "f1": mean[(mode, ratio)],
                "norm_f1": normalized_f1(mean[(mode, ratio)], f1_fr, f1_fa),
                "ttft_ticks": float(np.mean(v["ticks"])) if v["ticks"] else 0.0,
                "recomputed_tokens": float(np.mean(v["rec"])) if v["rec"] else 0.0,
            })
            if mode in ("cacheblend", "fusionrag") and ratio > 0:
                hist = position_histogram(selections[(mode, ratio)], grid.hist_bins)
                res.histograms.extend({"mode": mode, "ratio": float(ratio), "seed": seed, "bin": b,
                                       "count": int(c)} for b, c in enumerate(hist))
        for variant in ("isolated", "fused"):
            devs = np.concatenate([kv_deviation(pipe.context(ex.question), pipe.stores[variant], pipe.system, model,
                                                [CACHEBLEND_LAYER]).chunk_scores(CACHEBLEND_LAYER) for ex in qa])
            res.deviations.extend({"seed": seed, "variant": variant, "quantile": q,
                                   "deviation": float(np.quantile(devs, q))} for q in QUANTILES)
    if out_dir is not None:
        res.write(out_dir, grid)
    return res


# -- focused analyses --------------------------------------------------------

@dataclass
class DeviationReport:
    isolated: np.ndarray  # per-query mean second-layer K deviation over chunk tokens
    fused: np.ndarray

    @property
    def reduction(self) -> float:
        return 1.0 - float(self.fused.mean()) / float(self.isolated.mean())


def deviation_reduction(spec: CorpusSpec, seed: int, model_spec: str = "random", top_n: int = 10,
                        context_chunks: int = 10) -> DeviationReport:
    """Second-layer K deviation of stitched ISOLATED vs FUSED records against a full prefill."""
    model = make_model(model_spec)
    chunks, qa = gen_synthetic_corpus(spec, seed)
    pipe, _ = build_pipeline(chunks, model, PreprocessConfig(top_n=top_n), top_chunks=context_chunks)
    iso, fused = [], []
    for ex in qa:
        ctx = pipe.context(ex.question)
        iso.append(kv_deviation(ctx, pipe.stores["isolated"], pipe.system, model,
                                [CACHEBLEND_LAYER]).chunk_scores(CACHEBLEND_LAYER).mean())
        fused.append(kv_deviation(ctx, pipe.stores["fused"], pipe.system, model,
                                  [CACHEBLEND_LAYER]).chunk_scores(CACHEBLEND_LAYER).mean())
    return DeviationReport(np.array(iso), np.array(fused))


@dataclass
class SelectionBiasReport:
    cacheblend: np.ndarray
    query_guided: np.ndarray

    @property
    def chi2_cacheblend(self) -> float:
        return chi2_to_uniform(self.cacheblend)

    @property
    def chi2_query_guided(self) -> float:
        return chi2_to_uniform(self.query_guided)


def selection_bias(spec: CorpusSpec, seed: int, model_spec: str = "random", ratio: float = 0.15,
                   top_chunks: int = 4, bins: int = 10) -> SelectionBiasReport:
    """Within-chunk position histograms of both selectors on the same contexts and records."""
    model = make_model(model_spec)
    chunks, qa = gen_synthetic_corpus(spec, seed)
    pipe, _ = build_pipeline(chunks, model, fused=False, top_chunks=top_chunks)
    store = pipe.stores["isolated"]
    cb, qg = [], []
    for ex in qa:
        ctx = pipe.context(ex.question)
        cb.append((ctx, select_cacheblend(ctx, store, pipe.system, model, ratio)))
        qg.append((ctx, select_query_guided(ctx, store, pipe.system, model, ratio)))
    return SelectionBiasReport(position_histogram(cb, bins), position_histogram(qg, bins))


# -- storage replay ------------------------------------------------------------

@dataclass
class StorageReport:
    occurrences: int = 0
    alt_hits: int = 0
    prefix_hits: int = 0
    alt_records: int = 0
    prefix_copies: int = 0
    alt_computations: int = 0
    prefix_computations: int = 0
    alt_redundant: int = 0
    prefix_redundant: int = 0

    @property
    def alt_hit_rate(self) -> float:
        return self.alt_hits / self.occurrences if self.occurrences else 0.0

    @property
    def storage_reduction(self) -> float:
        return 1.0 - self.alt_records / self.prefix_copies if self.prefix_copies else 0.0

    @property
    def redundancy_reduction(self) -> float:
        return 1.0 - self.alt_redundant / self.prefix_redundant if self.prefix_redundant else 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(alt_hit_rate=self.alt_hit_rate, storage_reduction=self.storage_reduction,
                 redundancy_reduction=self.redundancy_reduction)
        return d


def _stub_kv() -> LayeredKV:
    z = np.zeros((1, 1, 1, 2), np.float32)
    return LayeredKV(z, z, np.array([1]))


def replay_storage(contexts, known, system_id: str = "system", check_every: int = 1) -> StorageReport:
    """Replay chunk contexts against alternative-path matching and a plain prefix cache.

    Both start with every ``known`` chunk cached under ``system prompt + chunk``.
    A miss computes the chunk; the plain cache then keeps a copy per distinct
    prefix, while the store keeps one record per chunk. A computation is
    redundant when that chunk was computed before.
    """
    from .kv_store import ChunkKVRecord, prefix_key

    store = KVStore(system_id)
    plain: dict[str, str] = {}
    rep = StorageReport()
    alt_seen, plain_seen = set(known), set(known)
    for cid in known:
        store.put_record(ChunkKVRecord(cid, _stub_kv(), 1))
        plain[prefix_key(system_id, [cid])] = cid
    for qi, ctx in enumerate(contexts):
        rep.occurrences += len(ctx)
        matched = store.alternative_path_match(ctx)
        rep.alt_hits += len(matched)
        for cid in ctx:
            if cid in matched:
                continue
            rep.alt_computations += 1
            rep.alt_redundant += cid in alt_seen
            alt_seen.add(cid)
            store.put_record(ChunkKVRecord(cid, _stub_kv(), 1))
        store.register_path(ctx)
        for i, cid in enumerate(ctx):
            key = prefix_key(system_id, ctx[: i + 1])
            if plain.get(key) == cid:
                rep.prefix_hits += 1
                continue
            rep.prefix_computations += 1
            rep.prefix_redundant += cid in plain_seen
            plain_seen.add(cid)
            plain[key] = cid
        if check_every and qi % check_every == 0:
            store.check_single_copy()
    store.check_single_copy()
    rep.alt_records = len(store)
    rep.prefix_copies = len(plain)
    return rep


# -- serving sweeps --------------------------------------------------------------

LATENCY_HEADER = ["request_id", "arrival_ticks", "load_ticks", "queue_ticks", "prefill_ticks", "ttft_ticks"]
THROUGHPUT_HEADER = ["rate", "scheduler", "requests", "makespan_ticks", "throughput", "mean_ttft_ticks",
                     "idle_fraction"]
LENGTH_HEADER = ["mode", "ratio", "context_chunks", "context_tokens", "ttft_ticks"]
STORAGE_HEADER = ["metric", "value"]


def latency_stack_rows(trace) -> list[dict]:
    rows = []
    for rid in sorted(trace.requests):
        r = trace.requests[rid]
        rows.append({"request_id": rid, "arrival_ticks": to_ticks(r.arrival),
                     "load_ticks": to_ticks(r.load_end - r.arrival),
                     "queue_ticks": to_ticks(r.prefill_start - r.load_end),
                     "prefill_ticks": to_ticks(r.prefill_end - r.prefill_start), "ttft_ticks": to_ticks(r.ttft)})
    return rows


def throughput_sweep(pipe: ServingPipeline, questions, rates, config: SchedulerConfig | None = None,
                     mode: str = "fusionrag", ratio: float = 0.15, seed: int = 0) -> list[dict]:
    rows = []
    for rate in rates:
        wl = poisson_workload(questions, rate, seed, mode, ratio)
        for name, runner in (("async", run_async), ("sync", run_sync)):
            tr = runner(wl, pipe, config)
            rows.append({"rate": float(rate), "scheduler": name, "requests": len(wl),
                         "makespan_ticks": to_ticks(tr.makespan), "throughput": len(wl) / tr.makespan,
                         "mean_ttft_ticks": float(np.mean([r.ttft for r in tr.requests.values()]) * TICKS_PER_SECOND),
                         "idle_fraction": tr.idle_fraction})
    return rows


def length_sweep(pipe: ServingPipeline, question: str, chunk_counts, ratio: float = 0.15,
                 cost: CostModel = CostModel()) -> list[dict]:
    """Compute-only TTFT of each mode as more chunks are retrieved."""
    rows = []
    layers = pipe.model.cfg.layers
    for k in chunk_counts:
        ctx = pipe.context(question, top_chunks=k)
        for mode in MODES:
            r = 0.0 if mode == "fr" else (1.0 if mode == "fa" else ratio)
            n_rec = budget(r, ctx.n_chunk_tokens) if mode in ("cacheblend", "fusionrag") else 0
            c = request_cost(mode, ctx, n_rec, layers)
            rows.append({"mode": mode, "ratio": r, "context_chunks": k, "context_tokens": ctx.n_context,
                         "ttft_ticks": to_ticks(cost.seconds(c.token_layers))})
    return rows


def chunks_from_spec(spec: CorpusSpec, seed: int) -> list[Chunk]:
    return gen_synthetic_corpus(spec, seed)[0]


def storage_rows(rep: StorageReport) -> list[dict]:
    return [{"metric": k, "value": v} for k, v in rep.as_dict().items()]


def normalized_cell(value) -> str:
    return value if value == UNDEFINED else f"{value:.1f}%"
