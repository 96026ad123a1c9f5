import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from chunkreuse.cli import main
from chunkreuse.experiments import (ExperimentGrid, chi2_to_uniform, position_histogram, replay_storage, run_grid)
from chunkreuse.metrics import UNDEFINED
from chunkreuse.synthetic import CorpusSpec, StorageWorkloadSpec, storage_workload

TINY = CorpusSpec(clusters=3, chunks_per_cluster=4, questions=12)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def grid_dirs(tmp_path_factory):
    grid = ExperimentGrid(ratios=(0.0, 0.15, 1.0), seeds=(0, 1), corpus=TINY)
    dirs = [tmp_path_factory.mktemp(f"grid{i}") for i in range(2)]
    results = [run_grid(grid, d) for d in dirs]
    return grid, dirs, results


def test_grid_files_and_headers(grid_dirs):
    grid, (d, _), (res, _) = grid_dirs
    for name in ("quality.csv", "selection_hist.csv", "deviation_cdf.csv", "predictions.csv", "metadata.json"):
        assert (d / name).exists()
    rows = read_csv(d / "quality.csv")
    assert len(rows) == 2 * (2 + 2 * 3)
    meta = json.loads((d / "metadata.json").read_text())
    assert "{keywords}" in meta["prompt_template"]


def test_grid_baseline_columns(grid_dirs):
    _, (d, _), (res, _) = grid_dirs
    for r in res.quality:
        if r["mode"] == "fa":
            assert r["norm_f1"] in (100.0, UNDEFINED)
        if r["mode"] == "fr":
            assert r["norm_f1"] in (0.0, UNDEFINED)
        assert r["failures"] == 0


def test_grid_is_byte_identical(grid_dirs):
    _, (a, b), _ = grid_dirs
    for name in ("quality.csv", "selection_hist.csv", "deviation_cdf.csv", "predictions.csv", "metadata.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_grid_endpoints_agree(grid_dirs):
    _, _, (res, _) = grid_dirs
    preds = {(p["seed"], p["qid"], p["mode"], p["ratio"]): p["pred"] for p in res.predictions}
    for (seed, qid, mode, ratio), pred in preds.items():
        if mode == "cacheblend" and ratio == 0.0:  # fusionrag at r=0 reuses the fused store instead
            assert pred == preds[(seed, qid, "fr", 0.0)]
        if mode in ("cacheblend", "fusionrag") and ratio == 1.0:
            assert pred == preds[(seed, qid, "fa", 1.0)]


def test_grid_only_fa():
    res = run_grid(ExperimentGrid(modes=("fa",), ratios=(1.0,), seeds=(0,), corpus=TINY))
    assert [r["mode"] for r in res.quality] == ["fa"]
    assert res.quality[0]["norm_f1"] in (100.0, UNDEFINED)


def test_grid_validation():
    with pytest.raises(ValueError):
        ExperimentGrid(ratios=(1.5,))
    with pytest.raises(ValueError):
        ExperimentGrid(modes=("nope",))


def test_histogram_and_chi2():
    assert chi2_to_uniform(np.array([5, 5, 5, 5])) == 0.0
    assert chi2_to_uniform(np.array([20, 0, 0, 0])) > chi2_to_uniform(np.array([8, 4, 4, 4]))


def test_storage_replay_small():
    contexts, known = storage_workload(StorageWorkloadSpec(queries=120), 3)
    rep = replay_storage(contexts, known)
    assert rep.alt_hits > rep.prefix_hits
    assert rep.alt_records <= rep.prefix_copies
    assert rep.alt_redundant <= rep.prefix_redundant
    assert 0.0 <= rep.alt_hit_rate <= 1.0


def run_cli(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "chunkreuse.cli", *args], capture_output=True, text=True, cwd=cwd,
                          timeout=600)


def test_cli_end_to_end(tmp_path):
    store = str(tmp_path / "store")
    out = run_cli("gen-corpus", "--out", str(tmp_path / "c"), "--clusters", "3", "--chunks-per-cluster", "4",
                  "--questions", "5")
    assert out.returncode == 0, out.stderr
    question = json.loads((tmp_path / "c" / "qa.jsonl").read_text().splitlines()[0])["question"]
    out = run_cli("--store-dir", store, "preprocess", "--corpus", str(tmp_path / "c" / "corpus.jsonl"), "--top-n", "3")
    assert out.returncode == 0, out.stderr
    assert set(json.loads(out.stdout)) == {"isolated", "fused"}
    answers = set()
    for mode in ("fa", "fr", "cacheblend", "fusionrag"):
        out = run_cli("--store-dir", store, "query", question, "--mode", mode, "--top-chunks", "3")
        assert out.returncode == 0, out.stderr
        doc = json.loads(out.stdout)
        assert len(doc["chunks"]) == 3 and "timing" in doc
        answers.add(doc["answer"])
    out = run_cli("--store-dir", store, "cache-stats")
    assert out.returncode == 0 and "fused" in json.loads(out.stdout)


def test_cli_bench_storage_and_exit_codes(tmp_path, capsys):
    assert main(["bench", "storage", "--out", str(tmp_path / "b"), "--queries", "100"]) == 0
    rows = read_csv(tmp_path / "b" / "storage.csv")
    assert {r["metric"] for r in rows} >= {"alt_hit_rate", "storage_reduction", "redundancy_reduction"}
    assert main(["--store-dir", str(tmp_path / "missing"), "cache-stats"]) != 0
    assert main(["--store-dir", str(tmp_path / "missing"), "query", "x"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["query", "x", "--mode", "bogus"])
    assert exc.value.code == 2


def test_cli_latency_replays_workload(tmp_path):
    common = ["--clusters", "3", "--chunks-per-cluster", "4", "--questions", "6", "--disk-bandwidth", "1e8",
              "--gpu-capacity", "5000000", "--cpu-capacity", "1", "--rates", "200"]
    assert main(["bench", "latency", "--out", str(tmp_path / "a"), *common]) == 0
    wl = tmp_path / "a" / "workload.jsonl"
    assert main(["bench", "latency", "--out", str(tmp_path / "b"), "--workload", str(wl), *common]) == 0
    for name in ("latency_async.csv", "latency_sync.csv", "trace_async.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.fixture(scope="module")
def saved_store(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-corpus", "--out", str(d / "c"), "--clusters", "3", "--chunks-per-cluster", "4",
                 "--questions", "4"]) == 0
    assert main(["preprocess", "--corpus", str(d / "c" / "corpus.jsonl"), "--out", str(d / "st"), "--top-n", "3",
                 "--report", str(d / "report.json")]) == 0
    questions = [json.loads(line)["question"] for line in (d / "c" / "qa.jsonl").read_text().splitlines()]
    return d, questions


def test_cli_preprocess_report(saved_store):
    d, _ = saved_store
    report = json.loads((d / "report.json").read_text())
    assert report["isolated"]["chunks"] == report["fused"]["chunks"] == 12
    assert report["fused"]["bytes"] > 0


def test_cli_query_emits_deviation_and_timing(saved_store, capsys):
    d, questions = saved_store
    (d / "q.txt").write_text(questions[0] + "\n")
    assert main(["--store-dir", str(d / "st"), "query", "--question-file", str(d / "q.txt"), "--mode", "cacheblend",
                 "--emit-deviation", str(d / "dev.csv"), "--emit-timing", str(d / "t.json")]) == 0
    doc = json.loads(capsys.readouterr().out)
    rows = read_csv(d / "dev.csv")
    assert list(rows[0]) == ["token_index", "chunk_id", "layer", "k_dev", "v_dev"]
    assert {r["chunk_id"] for r in rows} == set(doc["chunks"])
    assert {int(r["layer"]) for r in rows} == set(range(4))
    assert all(float(r["k_dev"]) == 0.0 for r in rows if r["layer"] == "0")  # first layer never deviates
    assert json.loads((d / "t.json").read_text())["ttft_ticks"] == doc["timing"]["ttft_ticks"]
    assert main(["--store-dir", str(d / "st"), "query"]) == 2
    assert main(["--store-dir", str(d / "st"), "query", "x", "--question-file", str(d / "q.txt")]) == 2


def test_cli_schedule_bench(saved_store, tmp_path):
    d, questions = saved_store
    from chunkreuse.synthetic import poisson_workload, write_workload_jsonl
    write_workload_jsonl(poisson_workload(questions, 200.0), tmp_path / "w.jsonl")
    base = ["--store-dir", str(d / "st"), "bench", "schedule", "--out", str(tmp_path / "b"),
            "--workload", str(tmp_path / "w.jsonl"), "--tier-bandwidths", "1e9,5e7", "--start-tier", "disk"]
    assert main(base + ["--tier-capacities", "3e6,0", "--trace-out", str(tmp_path / "tr.json"),
                        "--summary-out", str(tmp_path / "sum.csv")]) == 0
    a, s = read_csv(tmp_path / "sum.async.csv"), read_csv(tmp_path / "sum.sync.csv")
    assert list(a[0]) == ["request_id", "ttft_ticks", "load_ticks", "prefill_ticks"] and len(a) == len(s) == 4
    trace = json.loads((tmp_path / "tr.async.json").read_text())
    assert trace["kind"] == "async"
    assert main(base + ["--sync", "--summary-out", str(tmp_path / "one.csv")]) == 0
    assert read_csv(tmp_path / "one.csv") == s
    assert main(base + ["--tier-capacities", "0,0"]) == 2  # nothing fits on the GPU
    assert main(["--store-dir", str(d / "st"), "bench", "schedule", "--out", str(tmp_path / "b")]) == 2
