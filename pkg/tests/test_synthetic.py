import json

import pytest

from chunkreuse.circuits import SYMBOLS
from chunkreuse.retrieval import KnowledgeBase, retrieve_topn, tokenize, write_corpus_jsonl
from chunkreuse.synthetic import (CorpusSpec, QAExample, StorageWorkloadSpec, TimedRequest, gen_synthetic_corpus,
                                  poisson_workload, read_qa_jsonl, read_workload_jsonl, storage_workload,
                                  write_qa_jsonl, write_workload_jsonl)

SYM = set(SYMBOLS.decode())
SMALL = CorpusSpec(clusters=6, chunks_per_cluster=6, questions=40)


def facts(text: str) -> dict:
    """Scripted extraction: two-symbol words are links ``AB`` meaning A leads to B."""
    return {w[0]: w[1] for w in text.rstrip(".").split() if len(w) == 2 and set(w) <= SYM}


def follow(question: str, texts) -> str:
    links = {}
    for t in texts:
        links.update(facts(t))
    cur = question.split()[-1]
    while cur in links:
        cur = links[cur]
    return cur


def test_same_seed_same_bytes(tmp_path):
    for name in ("a", "b"):
        chunks, qa = gen_synthetic_corpus(SMALL, 7)
        write_corpus_jsonl(chunks, tmp_path / f"{name}.jsonl")
        write_qa_jsonl(qa, tmp_path / f"{name}.qa")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.qa").read_bytes() == (tmp_path / "b.qa").read_bytes()
    assert gen_synthetic_corpus(SMALL, 8)[1] != gen_synthetic_corpus(SMALL, 7)[1]


def test_one_hop_evidence_ranked_first():
    spec = CorpusSpec(clusters=5, chunks_per_cluster=6, max_hops=1, questions=30, distractors=0)
    chunks, qa = gen_synthetic_corpus(spec, 0)
    kb = KnowledgeBase(chunks)
    for ex in qa:
        assert ex.hops == 1
        assert retrieve_topn(tokenize(ex.question), kb, 4).chunk_ids[0] == ex.evidence[0]


def test_two_hop_answer_needs_exactly_its_evidence():
    chunks, qa = gen_synthetic_corpus(CorpusSpec(clusters=6, chunks_per_cluster=6, max_hops=3, questions=60), 1)
    by_id = {c.chunk_id: c.text.decode() for c in chunks}
    two = [ex for ex in qa if ex.hops == 2]
    assert two
    for ex in two:
        texts = [by_id[e] for e in ex.evidence]
        assert follow(ex.question, texts) == ex.answers[0]
        for drop in range(2):
            assert follow(ex.question, texts[:drop] + texts[drop + 1:]) != ex.answers[0]


def test_every_answer_is_extractable():
    chunks, qa = gen_synthetic_corpus(SMALL, 2)
    by_id = {c.chunk_id: c.text.decode() for c in chunks}
    for ex in qa:
        assert follow(ex.question, [by_id[e] for e in ex.evidence]) == ex.answers[0]
        assert 1 <= ex.hops <= SMALL.max_hops


def test_infeasible_specs():
    with pytest.raises(ValueError):
        gen_synthetic_corpus(CorpusSpec(max_hops=5), 0)
    with pytest.raises(ValueError):
        gen_synthetic_corpus(CorpusSpec(clusters=20, max_hops=3), 0)  # not enough symbols
    with pytest.raises(ValueError):
        QAExample("q", ())


def test_qa_roundtrip(tmp_path):
    _, qa = gen_synthetic_corpus(SMALL, 0)
    write_qa_jsonl(qa, tmp_path / "qa.jsonl")
    assert read_qa_jsonl(tmp_path / "qa.jsonl") == qa


def test_storage_workload_fractions():
    spec = StorageWorkloadSpec(queries=1000)
    contexts, known = storage_workload(spec, 0)
    flat = [c for ctx in contexts for c in ctx]
    assert all(len(ctx) == len(set(ctx)) == spec.chunks_per_query for ctx in contexts)
    frac = {k: sum(c.startswith(k) for c in flat) / len(flat) for k in ("known", "shared", "unique")}
    assert frac["known"] == pytest.approx(0.6, abs=0.03)
    assert frac["shared"] == pytest.approx(0.3, abs=0.03)
    assert frac["unique"] == pytest.approx(0.1, abs=0.02)
    assert set(known) >= {c for c in flat if c.startswith("known")}
    with pytest.raises(ValueError):
        storage_workload(StorageWorkloadSpec(known=0.5), 0)


def test_workload_roundtrip(tmp_path):
    wl = poisson_workload(["q a", "q b", "q c"], 20.0, seed=5, mode="cacheblend", ratio=0.1)
    assert all(b.arrival > a.arrival for a, b in zip(wl, wl[1:]))
    write_workload_jsonl(wl, tmp_path / "w.jsonl")
    assert read_workload_jsonl(tmp_path / "w.jsonl") == wl
    first = json.loads((tmp_path / "w.jsonl").read_text().splitlines()[0])
    assert isinstance(first["arrival_tick"], int)
    with pytest.raises(ValueError):
        poisson_workload(["q"], 0.0)
    assert TimedRequest("r", 0.0, "q").mode == "fusionrag"
