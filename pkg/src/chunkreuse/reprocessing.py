"""Online stage: stitching cached chunks, measuring deviation, choosing tokens to recompute.

Positions are 1-based: the system prompt sits at ``1..|S|``, retrieved chunks
follow back to back, and the question comes last. Row indices into the stitched
cache are 0-based, so row ``i`` holds position ``i + 1``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .kv_store import KVStore
from .model import LayeredKV, Model, causal_mask, forward, greedy_decode, last_layer_query_states
from .preprocessing import SystemPromptKV, prefill_after, relocate
from .sparse_attention import ExclusivePage, KernelStats, QIndexPlan, q_sparse_attn

MODES = ("fa", "fr", "cacheblend", "fusionrag")
CACHEBLEND_LAYER = 1  # 0-based: deviation is measured on the second layer
K_COMPONENT, V_COMPONENT = 0, 1


@dataclass(frozen=True)
class AssembledContext:
    system_tokens: np.ndarray
    chunk_ids: tuple
    chunk_tokens: tuple
    question_tokens: np.ndarray

    def __post_init__(self) -> None:
        if len(self.chunk_ids) != len(self.chunk_tokens):
            raise ValueError("one token array per chunk id")
        if len(self.question_tokens) == 0:
            raise ValueError("question must be non-empty")
        if any(len(t) == 0 for t in self.chunk_tokens):
            raise ValueError("empty chunk in context")

    @property
    def n_system(self) -> int:
        return len(self.system_tokens)

    @property
    def chunk_lengths(self) -> list[int]:
        return [len(t) for t in self.chunk_tokens]

    @property
    def n_chunk_tokens(self) -> int:
        return sum(self.chunk_lengths)

    @property
    def n_context(self) -> int:
        """System prompt plus chunks: the rows of the stitched cache."""
        return self.n_system + self.n_chunk_tokens

    @property
    def n_total(self) -> int:
        return self.n_context + len(self.question_tokens)

    @property
    def chunk_starts(self) -> list[int]:
        """Target position of each chunk's first token."""
        return [self.n_system + 1 + int(o) for o in np.cumsum([0] + self.chunk_lengths[:-1])]

    @property
    def chunk_rows(self) -> np.ndarray:
        return np.arange(self.n_system, self.n_context)

    @property
    def chunk_of_row(self) -> np.ndarray:
        """For each chunk token (in order), the index of the chunk it belongs to."""
        return np.repeat(np.arange(len(self.chunk_ids)), self.chunk_lengths)

    @property
    def question_positions(self) -> np.ndarray:
        return np.arange(self.n_context + 1, self.n_total + 1)

    @property
    def tokens(self) -> np.ndarray:
        parts = [self.system_tokens, *self.chunk_tokens, self.question_tokens]
        return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])

    @property
    def positions(self) -> np.ndarray:
        return np.arange(1, self.n_total + 1)


def assemble(system_tokens, chunks, question_tokens) -> AssembledContext:
    """``chunks`` are ``Chunk`` objects in the order they are placed."""
    return AssembledContext(np.asarray(system_tokens, dtype=np.int64), tuple(c.chunk_id for c in chunks),
                            tuple(np.asarray(c.tokens, dtype=np.int64) for c in chunks),
                            np.asarray(question_tokens, dtype=np.int64))


@dataclass(frozen=True)
class CriticalTokenSet:
    indices: np.ndarray  # global 0-based rows, sorted
    per_chunk: dict  # chunk index -> within-chunk offsets
    ratio: float
    scores: np.ndarray | None = field(default=None, repr=False)  # per chunk token

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class DeviationMap:
    """``delta[t, l, c]``: squared K (c=0) / V (c=1) difference between reuse and full prefill."""

    delta: np.ndarray
    n_system: int

    def chunk_scores(self, layer: int, component: int | str = K_COMPONENT) -> np.ndarray:
        rows = self.delta[self.n_system:, layer]
        if component == "both":
            return rows.sum(axis=-1)
        return rows[:, int(component)]


def budget(r: float, n: int) -> int:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {r}")
    return min(n, int(np.floor(r * n + 0.5)))


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, lower index first on ties, returned sorted."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:k])


def _critical_set(ctx: AssembledContext, scores: np.ndarray, r: float) -> CriticalTokenSet:
    offs = top_k_rows(scores, budget(r, ctx.n_chunk_tokens))
    owner = ctx.chunk_of_row
    starts = np.cumsum([0] + ctx.chunk_lengths[:-1])
    per_chunk = {i: offs[owner[offs] == i] - starts[i] for i in range(len(ctx.chunk_ids))}
    return CriticalTokenSet(offs + ctx.n_system, per_chunk, r, scores)


# -- context assembly -------------------------------------------------------

def full_prefill(ctx: AssembledContext, model: Model, system: SystemPromptKV | None = None):
    """Dense forward over the whole prompt: ``(logits, kv)``.

    With ``system`` the cached system-prompt KV is reused as an exact prefix.
    """
    if system is None:
        return forward(model, ctx.tokens, ctx.positions)
    _check_system(ctx, system)
    rest = ctx.tokens[ctx.n_system:]
    return forward(model, rest, ctx.positions[ctx.n_system:], system.kv)


def _check_system(ctx: AssembledContext, system: SystemPromptKV) -> None:
    if not np.array_equal(ctx.system_tokens, system.tokens):
        raise ValueError("context system prompt differs from the cached one")


def stitch_full_reuse(ctx: AssembledContext, store: KVStore, system: SystemPromptKV, model: Model,
                      fallback: bool = False) -> LayeredKV:
    """System-prompt KV followed by every chunk's cached KV moved to its target range."""
    _check_system(ctx, system)
    matched = store.alternative_path_match(ctx.chunk_ids) if ctx.chunk_ids else {}
    parts = [system.kv]
    for cid, tokens, start in zip(ctx.chunk_ids, ctx.chunk_tokens, ctx.chunk_starts):
        if cid in matched:
            rec = store.records[cid]
            if rec.n_tokens != len(tokens):
                raise ValueError(f"record for {cid} has {rec.n_tokens} tokens, chunk has {len(tokens)}")
            kv = rec.kv
        elif fallback:
            kv = prefill_after(model, tokens, system.kv)
        else:
            raise KeyError(f"chunk {cid} has no cached KV; enable fallback to prefill it on the fly")
        parts.append(relocate(kv, start, model))
    out = parts[0]
    for p in parts[1:]:
        out = out.concat(p)
    return out


def parallel_context_mask(ctx: AssembledContext) -> np.ndarray:
    """Block-diagonal visibility of stitched reuse over ``[S, C1..Cn, Q]`` rows.

    Chunk tokens see the system prompt and earlier tokens of their own chunk;
    the question sees everything before it.
    """
    n = ctx.n_total
    pos = ctx.positions
    mask = causal_mask(pos, pos)
    block = np.full(n, -1)
    for i, (s, length) in enumerate(zip(ctx.chunk_starts, ctx.chunk_lengths)):
        block[s - 1:s - 1 + length] = i
    cross = (block[:, None] >= 0) & (block[None, :] >= 0) & (block[:, None] != block[None, :])
    return mask & ~cross


# -- deviation and selection ---------------------------------------------

def kv_deviation(ctx: AssembledContext, store: KVStore, system: SystemPromptKV, model: Model,
                 layers_to_eval=None, stitched: LayeredKV | None = None) -> DeviationMap:
    """Per-token squared K/V differences between stitched reuse and a full prefill."""
    if stitched is None:
        stitched = stitch_full_reuse(ctx, store, system, model)
    _, fa = full_prefill(ctx, model, system)
    n = ctx.n_context
    layers = range(model.cfg.layers) if layers_to_eval is None else list(layers_to_eval)
    delta = np.zeros((n, model.cfg.layers, 2), np.float64)
    for layer in layers:
        for c, (a, b) in enumerate(((fa.k, stitched.k), (fa.v, stitched.v))):
            diff = a[layer, :n].astype(np.float64) - b[layer].astype(np.float64)
            delta[:, layer, c] = (diff * diff).sum(axis=(1, 2))
    return DeviationMap(delta, ctx.n_system)


def select_cacheblend(ctx: AssembledContext, store: KVStore, system: SystemPromptKV, model: Model, r: float,
                      component: int | str = K_COMPONENT, stitched: LayeredKV | None = None) -> CriticalTokenSet:
    """Top chunk tokens by second-layer deviation."""
    dev = kv_deviation(ctx, store, system, model, [CACHEBLEND_LAYER], stitched)
    return _critical_set(ctx, dev.chunk_scores(CACHEBLEND_LAYER, component), r)


def query_guided_scores(ctx: AssembledContext, stitched: LayeredKV, model: Model, normalize: str = "softmax"):
    """Column scores of final-layer question queries against every chunk key."""
    q = last_layer_query_states(model, ctx.question_tokens, ctx.question_positions, stitched)
    keys = stitched.k[-1, ctx.chunk_rows]
    s = np.einsum("qhd,khd->hqk", q.astype(np.float64), keys.astype(np.float64)) / np.sqrt(model.cfg.head_dim)
    if normalize == "softmax":
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
    elif normalize != "raw":
        raise ValueError(f"unknown normalization {normalize!r}")
    return s.sum(axis=(0, 1))


def select_query_guided(ctx: AssembledContext, store: KVStore, system: SystemPromptKV, model: Model, r: float,
                        normalize: str = "softmax", stitched: LayeredKV | None = None) -> CriticalTokenSet:
    if stitched is None:
        stitched = stitch_full_reuse(ctx, store, system, model)
    return _critical_set(ctx, query_guided_scores(ctx, stitched, model, normalize), r)


# -- sparse prefill ------------------------------------------------------

@dataclass
class PrefillTiming:
    load_s: float = 0.0
    selection_s: float = 0.0
    prefill_s: float = 0.0
    decode_s: float = 0.0
    recomputed_tokens: int = 0
    prefill_tokens: int = 0  # rows run through the model during prefill
    flops: int = 0

    @property
    def ttft_s(self) -> float:
        return self.load_s + self.selection_s + self.prefill_s

    def as_dict(self) -> dict:
        return {"load_s": self.load_s, "selection_s": self.selection_s, "prefill_s": self.prefill_s,
                "decode_s": self.decode_s, "ttft_s": self.ttft_s, "recomputed_tokens": self.recomputed_tokens,
                "prefill_tokens": self.prefill_tokens, "flops": self.flops}


def sparse_prefill(ctx: AssembledContext, stitched: LayeredKV, model: Model, crit: CriticalTokenSet,
                   stats: KernelStats | None = None):
    """Recompute critical rows and the question over the read-only stitched cache.

    Returns ``(last_logits, merged_kv)`` where ``merged_kv`` is the stitched cache
    with critical rows replaced by their fresh K/V and the question appended.
    """
    cfg = model.cfg
    crit_rows = np.asarray(crit.indices, dtype=np.int64)
    if len(crit_rows) and (crit_rows.min() < ctx.n_system or crit_rows.max() >= ctx.n_context):
        raise ValueError("critical rows must be chunk tokens")
    plan = QIndexPlan(stitched.n_tokens, crit_rows, len(ctx.question_tokens))
    tokens = np.concatenate([ctx.tokens[crit_rows], ctx.question_tokens])
    positions = np.concatenate([stitched.positions[crit_rows], ctx.question_positions])
    x = model.embed_tokens(tokens)
    merged_k = stitched.k.copy()
    merged_v = stitched.v.copy()
    n_crit = len(crit_rows)
    new_k = np.empty((cfg.layers, len(tokens), cfg.heads, cfg.head_dim), np.float32)
    new_v = np.empty_like(new_k)
    for layer in range(cfg.layers):
        q, k, v = model.qkv(layer, x, positions)
        page = ExclusivePage.allocate(plan, cfg.heads, cfg.head_dim)
        out = q_sparse_attn(q, k, v, stitched.k[layer], stitched.v[layer], stitched.positions, positions, plan,
                            page, stats=stats)
        x = model.finish_layer(layer, x, out)
        new_k[layer], new_v[layer] = page.k, page.v
    merged_k[:, crit_rows] = new_k[:, :n_crit]
    merged_v[:, crit_rows] = new_v[:, :n_crit]
    merged = LayeredKV(merged_k, merged_v, stitched.positions.copy()).concat(
        LayeredKV(new_k[:, n_crit:], new_v[:, n_crit:], ctx.question_positions))
    return model.logits(x[-1:])[0], merged


def sparse_prefill_and_decode(ctx: AssembledContext, store: KVStore, system: SystemPromptKV, model: Model,
                              crit: CriticalTokenSet, max_new_tokens: int, stitched: LayeredKV | None = None,
                              timing: PrefillTiming | None = None, stop_tokens=()):
    timing = timing or PrefillTiming()
    if stitched is None:
        t0 = time.perf_counter()
        stitched = stitch_full_reuse(ctx, store, system, model)
        timing.load_s += time.perf_counter() - t0
    stats = KernelStats()
    t0 = time.perf_counter()
    logits, merged = sparse_prefill(ctx, stitched, model, crit, stats)
    timing.prefill_s += time.perf_counter() - t0
    timing.recomputed_tokens = len(crit)
    timing.prefill_tokens = len(crit) + len(ctx.question_tokens)
    timing.flops = stats.flops
    t0 = time.perf_counter()
    answer = greedy_decode(model, logits, merged, max_new_tokens, stop_tokens)
    timing.decode_s = time.perf_counter() - t0
    return answer, timing


# -- mode runner ---------------------------------------------------------

@dataclass
class RunResult:
    mode: str
    ratio: float
    answer: list
    timing: PrefillTiming
    critical: CriticalTokenSet | None = None


def run_mode(mode: str, ctx: AssembledContext, model: Model, system: SystemPromptKV, store: KVStore | None,
             ratio: float = 0.15, max_new_tokens: int = 1, normalize: str = "softmax",
             component: int | str = K_COMPONENT, stop_tokens=()) -> RunResult:
    """One request end to end. ``store`` holds the records the mode reuses (unused for ``fa``)."""
    timing = PrefillTiming()
    if mode == "fa":
        t0 = time.perf_counter()
        logits, kv = full_prefill(ctx, model, system)
        timing.prefill_s = time.perf_counter() - t0
        timing.prefill_tokens = ctx.n_total - ctx.n_system
        timing.recomputed_tokens = ctx.n_chunk_tokens
        t0 = time.perf_counter()
        answer = greedy_decode(model, logits[-1], kv, max_new_tokens, stop_tokens)
        timing.decode_s = time.perf_counter() - t0
        return RunResult(mode, 1.0, answer, timing)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")

    t0 = time.perf_counter()
    stitched = stitch_full_reuse(ctx, store, system, model)
    timing.load_s = time.perf_counter() - t0
    if mode == "fr":
        t0 = time.perf_counter()
        logits, kv = forward(model, ctx.question_tokens, ctx.question_positions, stitched)
        timing.prefill_s = time.perf_counter() - t0
        timing.prefill_tokens = len(ctx.question_tokens)
        t0 = time.perf_counter()
        answer = greedy_decode(model, logits[-1], kv, max_new_tokens, stop_tokens)
        timing.decode_s = time.perf_counter() - t0
        return RunResult(mode, 0.0, answer, timing)

    t0 = time.perf_counter()
    if mode == "cacheblend":
        crit = select_cacheblend(ctx, store, system, model, ratio, component, stitched)
    else:
        crit = select_query_guided(ctx, store, system, model, ratio, normalize, stitched)
    timing.selection_s = time.perf_counter() - t0
    answer, timing = sparse_prefill_and_decode(ctx, store, system, model, crit, max_new_tokens, stitched, timing,
                                               stop_tokens)
    return RunResult(mode, ratio, answer, timing, crit)

