import numpy as np
import pytest

from chunkreuse.circuits import build_binding_model
from chunkreuse.kv_store import CapacityError, Tier, TierConfig
from chunkreuse.pipeline import CostModel, build_pipeline, request_cost
from chunkreuse.scheduler import (Request, RequestState, SchedulerConfig, layers_to_prefetch, run_async,
                                  run_sync)
from chunkreuse.synthetic import CorpusSpec, TimedRequest, gen_synthetic_corpus, poisson_workload

DISK_BW = 5e7


@pytest.fixture(scope="module")
def built():
    chunks, qa = gen_synthetic_corpus(CorpusSpec(clusters=4, chunks_per_cluster=5, questions=16), 0)
    pipe, _ = build_pipeline(chunks, build_binding_model(), top_chunks=3)
    return pipe, [ex.question for ex in qa]


def disjoint_pair(pipe, questions):
    for i, a in enumerate(questions):
        for b in questions[i + 1:]:
            if not set(pipe.context(a).chunk_ids) & set(pipe.context(b).chunk_ids):
                return a, b
    raise AssertionError("no disjoint question pair")


def on_disk(pipe, gpu_capacity=None):
    return pipe.with_tiers(TierConfig(gpu_capacity=gpu_capacity, cpu_capacity=0, disk_bandwidth=DISK_BW), Tier.DISK)


def load_and_prefill(pipe, q, mode="fusionrag", ratio=0.15):
    ctx = pipe.context(q)
    store = pipe.store_for(mode)
    load = sum(store.records[c].size_bytes for c in ctx.chunk_ids) / DISK_BW
    res = pipe.execute(q, mode, ratio, ctx)
    return load, CostModel().seconds(request_cost(mode, ctx, res.timing.recomputed_tokens, 4).token_layers)


def test_request_states_only_advance():
    r = Request("r", "q", "fr", 0.0, 0.0)
    r.advance(RequestState.LOADING)
    r.advance(RequestState.READY)
    with pytest.raises(AssertionError):
        r.advance(RequestState.LOADING)


def test_resident_request_is_ready_on_arrival(built):
    pipe, qs = built
    tr = run_async([TimedRequest("a", 0.5, qs[0])], pipe)
    rec = tr.requests["a"]
    assert rec.load_start == rec.load_end == rec.prefill_start == 0.5
    assert not tr.loads


def test_single_request_zero_latency_same_makespan(built):
    pipe, qs = built
    wl = [TimedRequest("a", 0.0, qs[1])]
    assert run_async(wl, pipe).makespan == run_sync(wl, pipe).makespan


def test_two_request_overlap(built):
    pipe, qs = built
    a, b = disjoint_pair(pipe, qs)
    disk = on_disk(pipe)
    wl = [TimedRequest("r1", 0.0, a), TimedRequest("r2", 0.0, b)]
    sync, asy = run_sync(wl, disk), run_async(wl, disk)
    (l1, p1), (l2, p2) = load_and_prefill(disk, a), load_and_prefill(disk, b)
    assert sync.makespan == pytest.approx(l1 + p1 + l2 + p2)
    assert asy.makespan == pytest.approx(l1 + max(p1, l2) + p2)
    assert asy.makespan < sync.makespan
    alone = run_async(wl[:1], disk)
    assert asy.requests["r1"].first_token == alone.requests["r1"].first_token
    assert asy.answers() == sync.answers()


def test_equal_requests_sync_is_2l_plus_2p(built):
    pipe, qs = built
    disk = on_disk(pipe)
    a, b = disjoint_pair(pipe, qs)
    (l1, p1), (l2, p2) = load_and_prefill(disk, a), load_and_prefill(disk, b)
    tr = run_sync([TimedRequest("r1", 0.0, a), TimedRequest("r2", 0.0, b)], disk)
    assert tr.makespan == pytest.approx(l1 + l2 + p1 + p2)
    tr.check_accounting()
    assert tr.busy_time + sum(e - s for s, e in tr.idle) == pytest.approx(tr.makespan)


def test_shared_disk_chunk_loaded_once(built):
    pipe, qs = built
    disk = on_disk(pipe)
    wl = [TimedRequest("r1", 0.0, qs[2]), TimedRequest("r2", 0.0, qs[2])]
    tr = run_async(wl, disk)
    loaded = [c for c, _, _ in tr.loads]
    assert sorted(loaded) == sorted(set(pipe.context(qs[2]).chunk_ids))
    assert tr.requests["r1"].load_end == tr.requests["r2"].load_end
    assert tr.requests["r1"].prefill_start == tr.requests["r2"].prefill_start  # batched together


def test_gpu_pressure_evicts_and_completes(built):
    pipe, qs = built
    sizes = [r.size_bytes for r in pipe.stores["fused"].records.values()]
    tight = on_disk(pipe, gpu_capacity=4 * max(sizes))
    wl = poisson_workload(qs, 200.0, seed=1)
    asy, sync = run_async(wl, tight), run_sync(wl, tight)
    assert asy.answers() == sync.answers()
    assert len(asy.loads) > len({c for c, _, _ in asy.loads})  # some chunks had to come back after eviction


def test_capacity_error_for_oversized_request(built):
    pipe, qs = built
    tiny = on_disk(pipe, gpu_capacity=10)
    with pytest.raises(CapacityError):
        run_async([TimedRequest("a", 0.0, qs[0])], tiny)


def test_zero_latency_sparse_arrivals_identical_traces(built):
    pipe, qs = built
    wl = poisson_workload(qs[:6], 2.0, seed=3)
    a, s = run_async(wl, pipe), run_sync(wl, pipe)
    for rid in a.requests:
        assert a.requests[rid].first_token == pytest.approx(s.requests[rid].first_token, abs=1e-9)
    assert a.busy == pytest.approx(s.busy)


def test_poisson_disk_heavy_idle_fraction(built):
    pipe, qs = built
    disk = on_disk(pipe, gpu_capacity=None)
    wl = poisson_workload(qs, 100.0, seed=2)
    a, s = run_async(wl, disk), run_sync(wl, disk)
    a.check_work_conservation()
    assert a.idle_fraction < s.idle_fraction
    assert a.makespan < s.makespan


def test_answers_match_isolated_execution(built):
    pipe, qs = built
    wl = [TimedRequest(f"r{i}", 0.001 * i, q, mode, 0.15)
          for i, (q, mode) in enumerate(zip(qs[:8], ["fa", "fr", "cacheblend", "fusionrag"] * 2))]
    disk = on_disk(pipe)
    expected = {w.request_id: pipe.execute(w.question, w.mode, w.ratio).answer for w in wl}
    assert run_async(wl, disk).answers() == expected
    assert run_sync(wl, disk).answers() == expected


def test_batch_token_cap(built):
    pipe, qs = built
    wl = [TimedRequest(f"r{i}", 0.0, q, "fa") for i, q in enumerate(qs[:6])]
    tr = run_async(wl, pipe, SchedulerConfig(batch_max_tokens=1))
    assert len({r.prefill_start for r in tr.requests.values()}) == 6  # cap forces one request per step
    wide = run_async(wl, pipe, SchedulerConfig(batch_max_tokens=10**6))
    assert len({r.prefill_start for r in wide.requests.values()}) == 1


def test_source_pipeline_untouched(built):
    pipe, qs = built
    disk = on_disk(pipe)
    before = {c: (r.tier, r.heat) for c, r in disk.stores["fused"].records.items()}
    run_async(poisson_workload(qs[:4], 50.0), disk)
    assert {c: (r.tier, r.heat) for c, r in disk.stores["fused"].records.items()} == before


def test_trace_json_and_summary(built):
    pipe, qs = built
    tr = run_async(poisson_workload(qs[:3], 50.0), on_disk(pipe))
    import json
    doc = json.loads(tr.to_json())
    assert doc["kind"] == "async" and len(doc["requests"]) == 3
    rows = tr.summary_rows()
    assert set(rows[0]) == {"request_id", "ttft_ticks", "load_ticks", "prefill_ticks"}


def test_wall_clock_mode_matches_answers(built):
    pipe, qs = built
    wl = poisson_workload(qs[:4], 100.0, seed=4)
    disk = on_disk(pipe)
    tr = run_async(wl, disk, SchedulerConfig(time_scale=0.2), wall_clock=True)
    assert tr.answers() == run_sync(wl, disk).answers()


def test_layer_prefetch_example():
    assert layers_to_prefetch(28, 0.07, 0.05, 100) == 25
    assert layers_to_prefetch(28, 1.0, 0.05, 100) == 1
