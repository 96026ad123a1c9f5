"""Request scheduling over tiered KV storage.

Three roles share one virtual clock: the scheduler matches a request's chunks
and issues load tasks, the loader moves records to the GPU tier one task at a
time, and the engine runs batches of ready requests. In the asynchronous mode
loading and computing overlap. The synchronous baseline handles one request at
a time and leaves the engine idle while it loads.

Answers come from the real pipeline, so scheduling can only change timing.
"""

from __future__ import annotations

import heapq
import json
import math
import queue
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum

from .kv_store import CapacityError, KVStore, Tier
from .pipeline import CostModel, ServingPipeline, to_ticks
from .sparse_attention import QIndexPlan


class RequestState(IntEnum):
    MATCHING = 0
    LOADING = 1
    READY = 2
    RUNNING = 3
    DONE = 4


@dataclass
class Request:
    request_id: str
    question: str
    mode: str
    ratio: float
    arrival: float
    chunk_ids: tuple = ()
    state: RequestState = RequestState.MATCHING

    def advance(self, state: RequestState) -> None:
        if state <= self.state and not (state == self.state == RequestState.MATCHING):
            raise AssertionError(f"{self.request_id}: state cannot go from {self.state.name} to {state.name}")
        self.state = state


@dataclass
class LoadTask:
    store: str
    chunk_id: str
    source: Tier
    nbytes: int
    latency: float
    waiters: list = field(default_factory=list)
    start: float | None = None
    end: float | None = None


@dataclass
class BatchPlan:
    requests: list
    chunk_ids: tuple  # shared records, each once
    plans: dict  # request_id -> QIndexPlan (reuse modes only)
    tokens: int


@dataclass(frozen=True)
class SchedulerConfig:
    batch_max_tokens: int = 4096
    cost: CostModel = CostModel()
    time_scale: float = 1.0  # wall-clock mode only: real seconds per virtual second


@dataclass
class RequestRecord:
    request_id: str
    mode: str
    ratio: float
    arrival: float
    load_start: float = math.nan
    load_end: float = math.nan
    prefill_start: float = math.nan
    prefill_end: float = math.nan
    first_token: float = math.nan
    answer: list = field(default_factory=list)
    chunk_ids: list = field(default_factory=list)

    @property
    def ttft(self) -> float:
        return self.first_token - self.arrival


@dataclass
class ScheduleTrace:
    kind: str
    requests: dict
    busy: list  # (start, end) engine intervals
    loads: list  # (chunk_id, start, end)
    makespan: float = 0.0

    @property
    def idle(self) -> list:
        out, t = [], 0.0
        for s, e in sorted(self.busy):
            if s > t:
                out.append((t, s))
            t = max(t, e)
        if self.makespan > t:
            out.append((t, self.makespan))
        return out

    @property
    def busy_time(self) -> float:
        return sum(e - s for s, e in self.busy)

    @property
    def idle_fraction(self) -> float:
        return 1.0 - self.busy_time / self.makespan if self.makespan > 0 else 0.0

    def check_work_conservation(self, tol: float = 1e-9) -> None:
        """The engine is never idle while some request is ready and waiting."""
        for rec in self.requests.values():
            for s, e in self.idle:
                if s < rec.prefill_start - tol and e > rec.load_end + tol:
                    raise AssertionError(f"engine idle in [{s}, {e}] while {rec.request_id} was ready")

    def check_accounting(self, tol: float = 1e-9) -> None:
        total = self.busy_time + sum(e - s for s, e in self.idle)
        if abs(total - self.makespan) > tol * max(1.0, self.makespan):
            raise AssertionError("busy + idle does not add up to the makespan")

    def answers(self) -> dict:
        return {rid: list(r.answer) for rid, r in self.requests.items()}

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "makespan": self.makespan,
            "busy": self.busy,
            "idle": self.idle,
            "loads": self.loads,
            "requests": [asdict(r) for r in sorted(self.requests.values(), key=lambda r: r.request_id)],
        }, indent=1)

    def summary_rows(self) -> list[dict]:
        rows = []
        for rid in sorted(self.requests):
            r = self.requests[rid]
            rows.append({"request_id": rid, "ttft_ticks": to_ticks(r.ttft),
                         "load_ticks": to_ticks(r.load_end - r.arrival),
                         "prefill_ticks": to_ticks(r.prefill_end - r.prefill_start)})
        return rows


def _requests(workload) -> list[Request]:
    reqs = [Request(w.request_id, w.question, w.mode, w.ratio, float(w.arrival)) for w in workload]
    return sorted(reqs, key=lambda r: (r.arrival, r.request_id))


class _Simulation:
    """State shared by both virtual-clock schedulers."""

    def __init__(self, pipeline: ServingPipeline, config: SchedulerConfig):
        self.pipeline = pipeline
        self.config = config
        self.stores = {name: s.clone() for name, s in pipeline.stores.items()}
        self.records: dict[str, RequestRecord] = {}
        self.results: dict[str, tuple] = {}
        self.pinned: dict[str, list] = {}
        self.busy: list = []
        self.loads: list = []

    def store_of(self, req: Request) -> tuple[str, KVStore]:
        name = self.pipeline.store_name(req.mode)
        return name, self.stores[name]

    def match(self, req: Request) -> list[tuple[str, Tier, float, int]]:
        """Resolve the request's chunks; returns ``(chunk_id, tier, latency, bytes)`` for each."""
        req.advance(RequestState.MATCHING)
        ctx = self.pipeline.context(req.question)
        req.chunk_ids = ctx.chunk_ids
        self.records[req.request_id] = RequestRecord(req.request_id, req.mode, req.ratio, req.arrival,
                                                     chunk_ids=list(ctx.chunk_ids))
        self.results[req.request_id] = (ctx, None)
        if req.mode == "fa":
            return []
        _, store = self.store_of(req)
        matched = store.alternative_path_match(ctx.chunk_ids)
        missing = [c for c in ctx.chunk_ids if c not in matched]
        if missing:
            raise KeyError(f"request {req.request_id}: no cached KV for chunks {missing}")
        out = []
        for cid in ctx.chunk_ids:
            rec, tier, latency = store.fetch(cid)
            out.append((cid, tier, latency, rec.size_bytes))
        store.register_path(list(ctx.chunk_ids))
        return out

    def pin(self, req: Request, cid: str) -> None:
        _, store = self.store_of(req)
        store.pin(cid)
        self.pinned.setdefault(req.request_id, []).append(cid)

    def release(self, req: Request) -> None:
        _, store = self.store_of(req)
        for cid in self.pinned.pop(req.request_id, []):
            store.unpin(cid)

    def compute(self, req: Request):
        """Run the real pipeline once per request; returns ``(result, cost)``."""
        ctx, res = self.results[req.request_id]
        if res is None:
            result = self.pipeline.execute(req.question, req.mode, req.ratio, ctx)
            res = (result, self.pipeline.cost(req.mode, ctx, result))
            self.results[req.request_id] = (ctx, res)
        return res

    def batch_plan(self, reqs: list[Request]) -> BatchPlan:
        chunks, plans, tokens = [], {}, 0
        for r in reqs:
            result, cost = self.compute(r)
            tokens += cost.batch_tokens
            ctx = self.results[r.request_id][0]
            for c in ctx.chunk_ids:
                if c not in chunks:
                    chunks.append(c)
            if result.critical is not None:
                plans[r.request_id] = QIndexPlan(ctx.n_context, result.critical.indices, len(ctx.question_tokens))
        return BatchPlan(list(reqs), tuple(chunks), plans, tokens)

    def finish(self, kind: str) -> ScheduleTrace:
        makespan = max((r.first_token for r in self.records.values()), default=0.0)
        for name, store in self.stores.items():
            store.check_single_copy()
        trace = ScheduleTrace(kind, self.records, self.busy, self.loads, makespan)
        for rid, rec in self.records.items():
            rec.answer = list(self.results[rid][1][0].answer)
        trace.check_accounting()
        return trace


def run_sync(workload, pipeline: ServingPipeline, config: SchedulerConfig | None = None) -> ScheduleTrace:
    """One request at a time in arrival order: load everything, then compute."""
    config = config or SchedulerConfig()
    sim = _Simulation(pipeline, config)
    t = 0.0
    for req in _requests(workload):
        t = max(t, req.arrival)
        needs = sim.match(req)
        rec = sim.records[req.request_id]
        req.advance(RequestState.LOADING)
        rec.load_start = t
        _, store = sim.store_of(req)
        for cid, tier, latency, _ in needs:
            if store.records[cid].tier != Tier.GPU:
                latency = store.tiers.load_seconds(store.records[cid].size_bytes, store.records[cid].tier)
                sim.loads.append((cid, t, t + latency))
                t += latency
                store.promote(cid)
            sim.pin(req, cid)
        rec.load_end = t
        req.advance(RequestState.READY)
        sim.batch_plan([req])
        req.advance(RequestState.RUNNING)
        _, cost = sim.compute(req)
        duration = config.cost.seconds(cost.token_layers)
        rec.prefill_start, rec.prefill_end = t, t + duration
        sim.busy.append((t, t + duration))
        t += duration
        rec.first_token = t
        sim.release(req)
        req.advance(RequestState.DONE)
    return sim.finish("sync")


class _Coordinator:
    """Admission control and load deduplication, shared by both async modes.

    A request is admitted to loading only when the union of the working sets of
    all admitted requests fits in the GPU tier. Records are pinned as soon as
    they land, so a later load can never evict them, and admission guarantees
    that every load finds room. Requests that do not fit wait in FIFO order.
    """

    def __init__(self, sim: _Simulation):
        self.sim = sim
        self.reqs: dict[str, Request] = {}
        self.outstanding: dict[tuple, LoadTask] = {}
        self.waiting: dict[str, set] = {}
        self.ready: list[str] = []
        self.backlog: deque = deque()
        self.admitted: set[str] = set()

    def _chunks(self, req: Request) -> tuple:
        return req.chunk_ids if req.mode != "fa" else ()

    def _fits(self, req: Request) -> bool:
        name, store = self.sim.store_of(req)
        cap = store.tiers.gpu_capacity
        if cap is None:
            return True
        ws = set(self._chunks(req))
        if sum(store.records[c].size_bytes for c in ws) > cap:
            raise CapacityError(f"request {req.request_id} needs more than the whole GPU tier")
        for rid in self.admitted:
            other = self.reqs[rid]
            if self.sim.store_of(other)[0] == name:
                ws.update(self._chunks(other))
        return sum(store.records[c].size_bytes for c in ws) <= cap

    def _admit(self, now: float) -> list[LoadTask]:
        new = []
        while self.backlog and self._fits(self.backlog[0]):
            req = self.backlog.popleft()
            self.admitted.add(req.request_id)
            self.sim.records[req.request_id].load_start = now
            req.advance(RequestState.LOADING)
            name, store = self.sim.store_of(req)
            missing = []
            for cid in self._chunks(req):
                if store.records[cid].tier == Tier.GPU and (name, cid) not in self.outstanding:
                    self.sim.pin(req, cid)
                else:
                    missing.append(cid)
            for cid in missing:
                task = self.outstanding.get((name, cid))
                if task is None:
                    rec = store.records[cid]
                    task = LoadTask(name, cid, rec.tier, rec.size_bytes,
                                    store.tiers.load_seconds(rec.size_bytes, rec.tier))
                    self.outstanding[(name, cid)] = task
                    new.append(task)
                task.waiters.append(req.request_id)
            if missing:
                self.waiting[req.request_id] = set(missing)
            else:
                self._ready(req, now)
        return new

    def _ready(self, req: Request, now: float) -> None:
        req.advance(RequestState.READY)
        self.sim.records[req.request_id].load_end = now
        self.ready.append(req.request_id)

    def arrive(self, req: Request, now: float) -> list[LoadTask]:
        """Match the request; returns the load tasks it adds to the loader queue."""
        self.reqs[req.request_id] = req
        self.sim.match(req)
        self.backlog.append(req)
        return self._admit(now)

    def loaded(self, task: LoadTask, now: float) -> None:
        self.sim.stores[task.store].promote(task.chunk_id)
        task.end = now
        self.sim.loads.append((task.chunk_id, task.start, now))
        del self.outstanding[(task.store, task.chunk_id)]
        for rid in task.waiters:
            self.sim.pin(self.reqs[rid], task.chunk_id)
            pending = self.waiting[rid]
            pending.discard(task.chunk_id)
            if not pending:
                del self.waiting[rid]
                self._ready(self.reqs[rid], now)

    def take_batch(self, max_tokens: int) -> list[Request]:
        """Ready requests in FIFO order up to the token cap (always at least one)."""
        batch, tokens = [], 0
        for rid in list(self.ready):
            _, cost = self.sim.compute(self.reqs[rid])
            if batch and tokens + cost.batch_tokens > max_tokens:
                break
            batch.append(self.reqs[rid])
            tokens += cost.batch_tokens
        for r in batch:
            self.ready.remove(r.request_id)
            r.advance(RequestState.RUNNING)
        return batch

    def complete(self, batch, now: float) -> list[LoadTask]:
        for r in batch:
            rec = self.sim.records[r.request_id]
            rec.prefill_end = rec.first_token = now
            self.sim.release(r)
            self.admitted.discard(r.request_id)
            r.advance(RequestState.DONE)
        return self._admit(now)


def run_async(workload, pipeline: ServingPipeline, config: SchedulerConfig | None = None,
              wall_clock: bool = False) -> ScheduleTrace:
    """Loader and engine progress concurrently; the engine batches every ready request it can fit."""
    config = config or SchedulerConfig()
    if wall_clock:
        return _run_threaded(workload, pipeline, config)
    sim = _Simulation(pipeline, config)
    coord = _Coordinator(sim)
    events: list = []
    seq = 0

    def push(t, kind, payload):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, payload))
        seq += 1

    for r in _requests(workload):
        push(r.arrival, "arrive", r)

    load_queue: deque = deque()
    loader_busy = engine_busy = False
    now = 0.0
    while events:
        now, _, kind, payload = heapq.heappop(events)
        if kind == "arrive":
            load_queue.extend(coord.arrive(payload, now))
        elif kind == "loaded":
            loader_busy = False
            coord.loaded(payload, now)
        elif kind == "batch_done":
            engine_busy = False
            load_queue.extend(coord.complete(payload.requests, now))
        if events and events[0][0] == now:
            continue  # let simultaneous events land before dispatching
        if not engine_busy and coord.ready:
            batch = coord.take_batch(config.batch_max_tokens)
            for r in batch:
                sim.records[r.request_id].prefill_start = now
            plan = sim.batch_plan(batch)
            duration = config.cost.seconds(sum(sim.compute(r)[1].token_layers for r in batch))
            sim.busy.append((now, now + duration))
            engine_busy = True
            push(now + duration, "batch_done", plan)
        if not loader_busy and load_queue:
            task = load_queue.popleft()
            task.start = now
            loader_busy = True
            push(now + task.latency, "loaded", task)
    if coord.backlog or coord.waiting:
        raise AssertionError("requests left unserved")
    trace = sim.finish("async")
    trace.check_work_conservation()
    return trace


def _run_threaded(workload, pipeline: ServingPipeline, config: SchedulerConfig) -> ScheduleTrace:
    """Real loader and engine threads with sleeps; times are wall seconds divided by ``time_scale``."""
    sim = _Simulation(pipeline, config)
    coord = _Coordinator(sim)
    reqs = _requests(workload)
    lock = threading.Condition(threading.RLock())
    load_q: queue.Queue = queue.Queue()
    done = threading.Event()
    errors: list = []
    remaining = [len(reqs)]
    scale = config.time_scale
    t0 = time.perf_counter()

    def clock() -> float:
        return (time.perf_counter() - t0) / scale

    def guarded(fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # re-raised in the calling thread
                errors.append(exc)
                done.set()
        return run

    def loader():
        while True:
            task = load_q.get()
            if task is None:
                return
            task.start = clock()
            time.sleep(task.latency * scale)
            with lock:
                coord.loaded(task, clock())
                lock.notify_all()

    def engine():
        while True:
            with lock:
                while not coord.ready and remaining[0] > 0:
                    lock.wait(0.05)
                if remaining[0] == 0:
                    return
                batch = coord.take_batch(config.batch_max_tokens)
                start = clock()
                for r in batch:
                    sim.records[r.request_id].prefill_start = start
            for r in batch:
                sim.compute(r)
            with lock:
                end = clock()
                sim.busy.append((start, end))
                for t in coord.complete(batch, end):
                    load_q.put(t)
                remaining[0] -= len(batch)
                if remaining[0] == 0:
                    done.set()
                lock.notify_all()

    threads = [threading.Thread(target=guarded(loader), daemon=True),
               threading.Thread(target=guarded(engine), daemon=True)]
    for th in threads:
        th.start()
    for req in reqs:
        delay = req.arrival - clock()
        if delay > 0:
            time.sleep(delay * scale)
        with lock:
            for t in coord.arrive(req, clock()):
                load_q.put(t)
            lock.notify_all()
    done.wait()
    load_q.put(None)
    if errors:
        raise errors[0]
    for th in threads:
        th.join()
    return sim.finish("async-wall")


def layers_to_prefetch(layers: int, compute_per_layer: float, kv_gb_per_layer: float, bandwidth_mb_s: float) -> int:
    """Layers that must be loaded before compute starts so layer-wise loading never stalls it."""
    load = kv_gb_per_layer * 1000.0 / bandwidth_mb_s
    if load <= compute_per_layer:
        return 1
    need = (layers * load - (layers - 1) * compute_per_layer) / load
    return min(layers, math.ceil(need - 1e-12))
