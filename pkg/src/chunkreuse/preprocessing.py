"""Offline stage: per-chunk KV caches computed in isolation, then fused against neighbours.

A fused record is the chunk re-prefilled after the system prompt and the cached
(isolated) KV of its most similar chunks, so its keys already carry some
cross-chunk context when it is stitched online.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kv_store import ChunkKVRecord, KVStore, TierConfig, Variant
from .model import LayeredKV, Model, forward
from .retrieval import KnowledgeBase, content_hash, tokenize
from .rope import shift_rope

DEFAULT_SYSTEM_PROMPT = tokenize("^ Answer the question using the passages.\n")


@dataclass(frozen=True)
class PreprocessConfig:
    top_n: int = 10
    system_prompt: tuple = tuple(int(t) for t in DEFAULT_SYSTEM_PROMPT)
    overwrite: bool = True
    fused_budget: int = 2048  # max neighbour tokens placed before a chunk
    workers: int = 1

    def __post_init__(self) -> None:
        if self.top_n < 0:
            raise ValueError("top_n must be non-negative")
        if len(self.system_prompt) == 0:
            raise ValueError("system prompt must be non-empty")
        if self.fused_budget < 0 or self.workers < 1:
            raise ValueError("fused_budget must be >= 0 and workers >= 1")

    @property
    def system_tokens(self) -> np.ndarray:
        return np.asarray(self.system_prompt, dtype=np.int64)


@dataclass(frozen=True)
class SystemPromptKV:
    tokens: np.ndarray
    kv: LayeredKV

    @property
    def system_id(self) -> str:
        return system_id(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class PreprocessReport:
    chunks: int = 0
    seconds: float = 0.0
    chunk_tokens: int = 0  # tokens prefilled for the chunks themselves
    context_tokens: int = 0  # neighbour tokens re-rotated into fused contexts
    bytes: int = 0
    per_chunk_seconds: list = field(default_factory=list)

    @property
    def mean_seconds_per_chunk(self) -> float:
        return self.seconds / self.chunks if self.chunks else 0.0

    def as_dict(self) -> dict:
        return {"chunks": self.chunks, "seconds": self.seconds, "mean_seconds_per_chunk": self.mean_seconds_per_chunk,
                "chunk_tokens": self.chunk_tokens, "context_tokens": self.context_tokens, "bytes": self.bytes}


def system_id(tokens) -> str:
    return content_hash(tokens, "system")


def compute_system_kv(model: Model, tokens) -> SystemPromptKV:
    tokens = np.asarray(tokens, dtype=np.int64)
    _, kv = forward(model, tokens, np.arange(1, len(tokens) + 1))
    return SystemPromptKV(tokens, kv)


def prefill_after(model: Model, tokens, past: LayeredKV) -> LayeredKV:
    """KV of ``tokens`` placed right after ``past``; only the new rows are returned."""
    start = int(past.positions.max()) + 1 if past.n_tokens else 1
    _, kv = forward(model, tokens, np.arange(start, start + len(tokens)), past)
    return kv.take(np.arange(past.n_tokens, kv.n_tokens))


def relocate(kv: LayeredKV, start: int, model: Model) -> LayeredKV:
    """Re-rotate keys so the rows occupy consecutive positions from ``start``."""
    new_pos = np.arange(start, start + kv.n_tokens)
    k = shift_rope(kv.k, kv.positions[None, :], new_pos[None, :], model.freqs)
    return LayeredKV(k, kv.v.copy(), new_pos)


def _map(fn, items, workers: int):
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def preprocess_isolated(kb: KnowledgeBase, model: Model, cfg: PreprocessConfig, store: KVStore | None = None,
                        tiers: TierConfig | None = None):
    """ISOLATED record for every chunk (each attends only to the system prompt).

    Returns ``(store, system_kv, report)``.
    """
    system = compute_system_kv(model, cfg.system_tokens)
    if store is None:
        store = KVStore(system.system_id, tiers)
    elif store.system_id != system.system_id:
        raise ValueError("store was built for a different system prompt")
    start = len(system) + 1
    report = PreprocessReport()
    t_all = time.perf_counter()

    def one(cid):
        t0 = time.perf_counter()
        kv = prefill_after(model, kb[cid].tokens, system.kv)
        return cid, kv, time.perf_counter() - t0

    for cid, kv, dt in _map(one, kb.ids, cfg.workers):
        store.put_record(ChunkKVRecord(cid, kv, start, Variant.ISOLATED), overwrite=cfg.overwrite)
        report.chunks += 1
        report.chunk_tokens += kv.n_tokens
        report.bytes += kv.nbytes
        report.per_chunk_seconds.append(dt)
    report.seconds = time.perf_counter() - t_all
    return store, system, report


def fused_neighbours(cid: str, sim_index: dict, kb: KnowledgeBase, cfg: PreprocessConfig) -> list[str]:
    """Top-n neighbours, most similar first, truncated from the tail to fit the budget."""
    out, used = [], 0
    for nb in sim_index.get(cid, [])[: cfg.top_n]:
        if used + len(kb[nb]) > cfg.fused_budget:
            break
        out.append(nb)
        used += len(kb[nb])
    return out


def fused_record(cid: str, kb: KnowledgeBase, model: Model, system: SystemPromptKV, neighbours: list[str],
                 isolated: dict) -> ChunkKVRecord:
    past = system.kv
    for nb in neighbours:
        rec = isolated.get(nb)
        if rec is None:
            raise KeyError(f"neighbour chunk {nb} has no ISOLATED record")
        past = past.concat(relocate(rec.kv, past.n_tokens + 1, model))
    kv = prefill_after(model, kb[cid].tokens, past)
    return ChunkKVRecord(cid, kv, past.n_tokens + 1, Variant.FUSED)


def preprocess_fused(kb: KnowledgeBase, model: Model, cfg: PreprocessConfig, sim_index: dict, store: KVStore,
                     system: SystemPromptKV):
    """FUSED record for every chunk, prefilled after its neighbours' ISOLATED KV.

    Neighbour KV is read from a snapshot of the ISOLATED records taken up front,
    so results do not depend on chunk order. With ``cfg.overwrite`` the FUSED
    records replace the ISOLATED ones in ``store``; otherwise a new store is
    returned and ``store`` is left untouched. Returns ``(store, report)``.
    """
    isolated = {cid: rec for cid, rec in store.records.items() if rec.variant == Variant.ISOLATED}
    out = store if cfg.overwrite else KVStore(store.system_id, store.tiers)
    report = PreprocessReport()
    t_all = time.perf_counter()

    def one(cid):
        t0 = time.perf_counter()
        nbs = fused_neighbours(cid, sim_index, kb, cfg)
        rec = fused_record(cid, kb, model, system, nbs, isolated)
        return rec, sum(len(kb[n]) for n in nbs), time.perf_counter() - t0

    for rec, ctx_tokens, dt in _map(one, kb.ids, cfg.workers):
        out.put_record(rec, overwrite=cfg.overwrite)
        report.chunks += 1
        report.chunk_tokens += rec.n_tokens
        report.context_tokens += ctx_tokens
        report.bytes += rec.size_bytes
        report.per_chunk_seconds.append(dt)
    report.seconds = time.perf_counter() - t_all
    return out, report
