"""Deterministic synthetic corpora and workloads.

Corpus layout: each cluster is a group of paraphrased chunks over its own topic
words and owns a chain of facts ``AB``, ``BC``, ``CD``. Every fact sits in a
different chunk of the cluster at a uniformly random word slot. A question names
one symbol of the chain and is answered by the symbol at the end of it, so a
question of hop count ``h`` needs ``h`` evidence chunks read together.

Questions carry keywords copied from their evidence chunks, more from the chunk
holding the first fact than from deeper ones. Each question is accepted only
if retrieval ranks its evidence in the top chunks with the first fact most
similar; placing chunks in ascending score order then puts deeper facts first.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .circuits import SYMBOLS
from .metrics import normalize_answer
from .pipeline import TICKS_PER_SECOND, to_ticks
from .retrieval import Chunk, KnowledgeBase, retrieve_topn, tokenize

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"
PROMPT_TEMPLATE = "{keywords} which {symbol}"


@dataclass(frozen=True)
class CorpusSpec:
    clusters: int = 10
    chunks_per_cluster: int = 10
    overlap: float = 0.6  # chance a word slot keeps the cluster's base word
    max_hops: int = 3
    distractors: int = 0
    words_per_chunk: int = 10
    questions: int = 200
    top_chunks: int = 4
    keywords: tuple = (3, 2, 1)  # keywords taken from the 1st, 2nd, 3rd... evidence chunk

    def validate(self) -> None:
        if not 1 <= self.max_hops <= 4:
            raise ValueError("max_hops must be in 1..4")
        if self.clusters < 1 or self.questions < 0:
            raise ValueError("need at least one cluster")
        if self.chunks_per_cluster < self.max_hops:
            raise ValueError("each cluster needs a chunk per fact")
        if self.clusters * (self.max_hops + 1) > len(SYMBOLS):
            raise ValueError(f"{self.clusters} clusters of {self.max_hops} hops need more than {len(SYMBOLS)} symbols")
        if self.top_chunks < self.max_hops:
            raise ValueError("top_chunks must cover the longest chain")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must be in [0, 1]")
        if len(self.keywords) < self.max_hops or self.words_per_chunk < 2:
            raise ValueError("need a keyword count per hop and at least two words per chunk")


@dataclass(frozen=True)
class QAExample:
    question: str
    answers: tuple
    evidence: tuple = ()  # chunk ids, first fact first
    hops: int = 0
    qid: str = ""

    def __post_init__(self) -> None:
        if not self.answers:
            raise ValueError("a QA example needs at least one gold answer")

    def to_json(self) -> str:
        d = asdict(self)
        d["answers"], d["evidence"] = list(self.answers), list(self.evidence)
        return json.dumps(d, sort_keys=True)


def _lexicon(rng: np.random.Generator, n: int) -> list[str]:
    words: set[str] = set()
    out = []
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in words:
            words.add(w)
            out.append(w)
    return out


def _words(chunk: Chunk) -> list[str]:
    return [w for w in chunk.text.decode().rstrip(".").split() if not any(ch in SYMBOLS.decode() for ch in w)]


def _question(rng, evidence, counts, per_hop, symbol) -> str:
    keywords = []
    for ev, k in zip(evidence, per_hop):
        # rarest words first, so keywords single out this chunk
        pool = sorted(set(_words(ev)), key=lambda w: (counts[w], w))[: max(k, 3)]
        keywords.extend(pool[int(i)] for i in rng.choice(len(pool), size=min(k, len(pool)), replace=False))
    order = rng.permutation(len(keywords))
    return PROMPT_TEMPLATE.format(keywords=" ".join(keywords[int(i)] for i in order), symbol=symbol)


def gen_synthetic_corpus(spec: CorpusSpec, seed: int = 0):
    """Returns ``(chunks, qa_examples)``; the same seed gives the same corpus bytes."""
    spec.validate()
    rng = np.random.default_rng(seed)
    lexicon = _lexicon(rng, 40 * spec.clusters + 200)
    symbols = [chr(b) for b in SYMBOLS]
    # chain ends are gold answers, so they must survive answer normalization
    ends = [s for s in symbols if normalize_answer(s)]
    ends = [ends[int(i)] for i in rng.permutation(len(ends))[: spec.clusters]]
    inner = [s for s in symbols if s not in ends]
    inner = [inner[int(i)] for i in rng.permutation(len(inner))]
    chunks: list[Chunk] = []
    chains: list[tuple[list[str], list[Chunk], int]] = []
    for c in range(spec.clusters):
        hops = 1 + c % spec.max_hops
        chain = inner[c * spec.max_hops: c * spec.max_hops + hops] + [ends[c]]
        topic = lexicon[40 * c: 40 * c + 40]
        base = [topic[int(i)] for i in rng.integers(len(topic), size=spec.words_per_chunk)]
        fact_slot = {int(j): f for f, j in enumerate(rng.permutation(spec.chunks_per_cluster)[:hops])}
        cluster_chunks, evidence = [], [None] * hops
        for j in range(spec.chunks_per_cluster):
            words = [w if rng.random() < spec.overlap else lexicon[int(rng.integers(len(lexicon)))] for w in base]
            if j in fact_slot:
                f = fact_slot[j]
                words.insert(int(rng.integers(len(words) + 1)), chain[f] + chain[f + 1])
            chunk = Chunk.from_text(" ".join(words) + ".", external_id=f"k{c:02d}-{j:02d}")
            cluster_chunks.append(chunk)
            if j in fact_slot:
                evidence[fact_slot[j]] = chunk
        chunks.extend(cluster_chunks)
        chains.append((chain, evidence, hops))
    for d in range(spec.distractors):
        words = [lexicon[int(i)] for i in rng.integers(len(lexicon), size=spec.words_per_chunk)]
        chunks.append(Chunk.from_text(" ".join(words) + ".", external_id=f"d{d:03d}"))

    kb = KnowledgeBase(chunks)
    counts: dict[str, int] = {}
    for ch in chunks:
        for w in set(_words(ch)):
            counts[w] = counts.get(w, 0) + 1
    qa: list[QAExample] = []
    failures = 0
    while len(qa) < spec.questions:
        c = int(rng.integers(spec.clusters))
        chain, evidence, hops = chains[c]
        start = int(rng.integers(hops))
        needed = evidence[start:]
        ev_ids = [e.chunk_id for e in needed]
        for _ in range(20):
            text = _question(rng, needed, counts, spec.keywords, chain[start])
            ranked = retrieve_topn(tokenize(text), kb, spec.top_chunks).chunk_ids
            if ranked[0] == ev_ids[0] and [r for r in ranked if r in ev_ids] == ev_ids:
                qa.append(QAExample(text, (chain[-1],), tuple(ev_ids), len(needed), f"q{len(qa):04d}"))
                break
        else:
            failures += 1
            if failures > 10 * max(spec.questions, 1):
                raise ValueError("could not place questions whose evidence retrieval ranks correctly")
    return chunks, qa


def write_qa_jsonl(qa, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in qa:
            f.write(ex.to_json() + "\n")


def read_qa_jsonl(path) -> list[QAExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(QAExample(d["question"], tuple(d["answers"]), tuple(d.get("evidence", ())),
                                     int(d.get("hops", 0)), d.get("qid", "")))
    return out


# -- workloads ---------------------------------------------------------------

@dataclass(frozen=True)
class StorageWorkloadSpec:
    queries: int = 1000
    chunks_per_query: int = 5
    known: float = 0.6
    shared_new: float = 0.3
    unique: float = 0.1
    known_pool: int = 300
    shared_pool: int = 150


def storage_workload(spec: StorageWorkloadSpec, seed: int = 0):
    """Chunk-id contexts for the storage replay, plus the ids that start out cached.

    Each context slot is a known chunk (already preprocessed), a chunk shared
    between users but new to the cache, or a chunk seen only once.
    """
    if abs(spec.known + spec.shared_new + spec.unique - 1.0) > 1e-9:
        raise ValueError("category fractions must sum to 1")
    rng = np.random.default_rng(seed)
    known = [f"known-{i:04d}" for i in range(spec.known_pool)]
    shared = [f"shared-{i:04d}" for i in range(spec.shared_pool)]
    probs = np.array([spec.known, spec.shared_new, spec.unique])
    contexts, n_unique = [], 0
    for _ in range(spec.queries):
        ctx: list[str] = []
        while len(ctx) < spec.chunks_per_query:
            kind = int(rng.choice(3, p=probs))
            if kind == 0:
                cid = known[int(rng.integers(len(known)))]
            elif kind == 1:
                cid = shared[int(rng.integers(len(shared)))]
            else:
                cid = f"unique-{n_unique:05d}"
                n_unique += 1
            if cid not in ctx:
                ctx.append(cid)
        contexts.append(ctx)
    return contexts, known


@dataclass(frozen=True)
class TimedRequest:
    request_id: str
    arrival: float
    question: str
    mode: str = "fusionrag"
    ratio: float = 0.15

    def to_json(self) -> str:
        return json.dumps({"request_id": self.request_id, "arrival_tick": to_ticks(self.arrival), "question": self.question,
                           "mode": self.mode, "ratio": self.ratio})


def poisson_workload(questions, rate: float, seed: int = 0, mode: str = "fusionrag", ratio: float = 0.15):
    """Requests with exponential inter-arrival gaps (``rate`` requests per second), on whole ticks."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    rng = np.random.default_rng(seed)
    t, out = 0.0, []
    for i, q in enumerate(questions):
        t += float(rng.exponential(1.0 / rate))
        out.append(TimedRequest(f"r{i:04d}", to_ticks(t) / TICKS_PER_SECOND, q, mode, ratio))
    return out


def write_workload_jsonl(workload, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in workload:
            f.write(r.to_json() + "\n")


def read_workload_jsonl(path) -> list[TimedRequest]:
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f):
            if line.strip():
                d = json.loads(line)
                out.append(TimedRequest(d.get("request_id", f"r{i:04d}"), d["arrival_tick"] / TICKS_PER_SECOND, d["question"],
                                        d.get("mode", "fusionrag"), float(d.get("ratio", 0.15))))
    return out
