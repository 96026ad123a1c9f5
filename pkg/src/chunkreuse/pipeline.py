"""Request-level glue from retrieval to per-mode execution.

Retrieved chunks are placed in ascending score order, so the most relevant
chunk ends up right before the question.
"""

from __future__ import annotations

from dataclasses import dataclass

from .kv_store import KVStore, Tier, TierConfig
from .model import Model
from .preprocessing import PreprocessConfig, SystemPromptKV, preprocess_fused, preprocess_isolated
from .reprocessing import AssembledContext, RunResult, assemble, run_mode
from .retrieval import KnowledgeBase, build_similarity_index, retrieve_topn, tokenize


@dataclass(frozen=True)
class CostModel:
    """Virtual engine time: a fixed cost per step plus a cost per token per layer (seconds)."""

    step_overhead: float = 2e-3
    token_layer: float = 5e-5

    def seconds(self, token_layers: int) -> float:
        return self.step_overhead + self.token_layer * token_layers


@dataclass(frozen=True)
class RequestCost:
    selection_token_layers: int
    prefill_token_layers: int
    batch_tokens: int

    @property
    def token_layers(self) -> int:
        return self.selection_token_layers + self.prefill_token_layers


def request_cost(mode: str, ctx: AssembledContext, n_recomputed: int, layers: int) -> RequestCost:
    """Token-layer work of one request; the cached system prompt is never recomputed."""
    q = len(ctx.question_tokens)
    if mode == "fa":
        rows = ctx.n_chunk_tokens + q
        return RequestCost(0, rows * layers, rows)
    if mode == "fr":
        return RequestCost(0, q * layers, q)
    if mode == "cacheblend":
        # full and reused passes over the first two layers for every chunk token
        sel = 2 * ctx.n_chunk_tokens
    elif mode == "fusionrag":
        sel = q * layers
    else:
        raise ValueError(f"unknown mode {mode!r}")
    rows = n_recomputed + q
    return RequestCost(sel, rows * layers, rows + sel // layers)


TICKS_PER_SECOND = 1_000_000


def to_ticks(seconds: float) -> int:
    """Virtual clock ticks are microseconds."""
    return int(round(seconds * TICKS_PER_SECOND))


class ServingPipeline:
    """Everything needed to answer a question in any mode.

    ``stores`` maps ``"isolated"`` and optionally ``"fused"`` to KV stores. The
    fused store serves ``fusionrag``; every other reuse mode reads the isolated one.
    """

    def __init__(self, model: Model, kb: KnowledgeBase, system: SystemPromptKV, stores: dict, top_chunks: int = 4,
                 max_new_tokens: int = 1, normalize: str = "softmax"):
        if "isolated" not in stores:
            raise ValueError("an isolated store is required")
        self.model = model
        self.kb = kb
        self.system = system
        self.stores = stores
        self.top_chunks = top_chunks
        self.max_new_tokens = max_new_tokens
        self.normalize = normalize

    def with_tiers(self, tiers: TierConfig, tier: Tier | None = None) -> "ServingPipeline":
        """Same model and records, stores rebuilt under ``tiers`` (see :meth:`KVStore.retiered`)."""
        stores = {name: s.retiered(tiers, tier) for name, s in self.stores.items()}
        return ServingPipeline(self.model, self.kb, self.system, stores, self.top_chunks, self.max_new_tokens,
                               self.normalize)

    def store_name(self, mode: str) -> str:
        return "fused" if mode == "fusionrag" and "fused" in self.stores else "isolated"

    def store_for(self, mode: str) -> KVStore:
        return self.stores[self.store_name(mode)]

    def retrieve(self, question: str, top_chunks: int | None = None):
        hits = retrieve_topn(tokenize(question), self.kb, top_chunks or self.top_chunks).hits
        return sorted(hits, key=lambda h: (h[1], h[0]))

    def context(self, question: str, top_chunks: int | None = None) -> AssembledContext:
        ordered = self.retrieve(question, top_chunks)
        return assemble(self.system.tokens, [self.kb[cid] for cid, _ in ordered], tokenize(question))

    def execute(self, question: str, mode: str, ratio: float, ctx: AssembledContext | None = None) -> RunResult:
        ctx = ctx if ctx is not None else self.context(question)
        return run_mode(mode, ctx, self.model, self.system, self.store_for(mode), ratio, self.max_new_tokens,
                        self.normalize)

    def cost(self, mode: str, ctx: AssembledContext, result: RunResult) -> RequestCost:
        return request_cost(mode, ctx, result.timing.recomputed_tokens if mode != "fa" else 0,
                            self.model.cfg.layers)


def build_pipeline(chunks, model: Model, cfg: PreprocessConfig | None = None, fused: bool = True,
                   top_chunks: int = 4, tiers: TierConfig | None = None, max_new_tokens: int = 1):
    """Preprocess ``chunks`` and wrap the result. Returns ``(pipeline, reports)``."""
    cfg = cfg or PreprocessConfig()
    kb = KnowledgeBase(chunks)
    iso, system, iso_report = preprocess_isolated(kb, model, cfg, tiers=tiers)
    stores = {"isolated": iso}
    reports = {"isolated": iso_report}
    if fused:
        fcfg = PreprocessConfig(cfg.top_n, cfg.system_prompt, False, cfg.fused_budget, cfg.workers)
        stores["fused"], reports["fused"] = preprocess_fused(kb, model, fcfg, build_similarity_index(kb, cfg.top_n),
                                                             iso, system)
    return ServingPipeline(model, kb, system, stores, top_chunks, max_new_tokens), reports
