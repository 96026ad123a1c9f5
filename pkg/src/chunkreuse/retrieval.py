"""Chunked knowledge base and exact cosine retrieval.

Embeddings are hashed bags of token bigrams: deterministic, dependency-free and
good enough to make near-duplicate and same-topic chunks land close together.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMBED_DIM = 256
_BOUNDARY = -1


def tokenize(text: str | bytes) -> np.ndarray:
    """Byte-level tokenizer (vocab 256)."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> str:
    return bytes(int(t) & 0xFF for t in tokens).decode("utf-8", errors="replace")


def content_hash(tokens, salt: str | None = None) -> str:
    h = hashlib.blake2b(digest_size=16)
    if salt is not None:
        h.update(salt.encode("utf-8") + b"\0")
    h.update(np.asarray(tokens, dtype="<i4").tobytes())
    return h.hexdigest()


def _bucket(a: int, b: int, dim: int) -> tuple[int, float]:
    x = ((a + 2) * 0x9E3779B1 ^ (b + 2) * 0x85EBCA77) & 0xFFFFFFFF
    x ^= x >> 15
    x = (x * 0x2C1B3C6D) & 0xFFFFFFFF
    x ^= x >> 12
    return x % dim, (1.0 if (x >> 31) & 1 else -1.0)


def embed(tokens, dim: int = EMBED_DIM) -> np.ndarray:
    tokens = [int(t) for t in np.asarray(tokens).reshape(-1)]
    if not tokens:
        raise ValueError("cannot embed an empty token list")
    vec = np.zeros(dim, np.float64)
    prev = _BOUNDARY
    for t in tokens:
        i, sign = _bucket(prev, t, dim)
        vec[i] += sign
        prev = t
    norm = np.sqrt((vec * vec).sum())
    if norm == 0:
        # every bigram cancelled out; fall back to the first bucket so the vector stays unit length
        vec[_bucket(_BOUNDARY, tokens[0], dim)[0]] = 1.0
        norm = 1.0
    return vec / norm


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    text: bytes
    tokens: np.ndarray = field(repr=False)
    embedding: np.ndarray = field(repr=False)
    external_id: str | None = None

    @classmethod
    def from_text(cls, text: str | bytes, external_id: str | None = None) -> "Chunk":
        tokens = tokenize(text)
        return cls.from_tokens(tokens, external_id)

    @classmethod
    def from_tokens(cls, tokens, external_id: str | None = None) -> "Chunk":
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if len(tokens) == 0:
            raise ValueError("a chunk needs at least one token")
        return cls(content_hash(tokens, external_id), bytes(int(t) & 0xFF for t in tokens), tokens, embed(tokens),
                   external_id)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class RetrievalResult:
    hits: list  # [(chunk_id, score)] best first

    @property
    def chunk_ids(self) -> list[str]:
        return [cid for cid, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


class KnowledgeBase:
    """Immutable after construction; chunk order is irrelevant to every query result."""

    def __init__(self, chunks):
        self.chunks: dict[str, Chunk] = {}
        for c in chunks:
            if c.chunk_id in self.chunks:
                continue
            self.chunks[c.chunk_id] = c
        self._ids = sorted(self.chunks)
        self._matrix = np.stack([self.chunks[i].embedding for i in self._ids]) if self._ids else np.zeros((0, EMBED_DIM))

    def __len__(self) -> int:
        return len(self.chunks)

    def __getitem__(self, chunk_id: str) -> Chunk:
        return self.chunks[chunk_id]

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self.chunks

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def scores(self, vec: np.ndarray) -> np.ndarray:
        # elementwise product + row sum keeps each row's result independent of the other rows
        return (self._matrix * vec[None, :]).sum(axis=1)


def _rank(ids: list[str], scores: np.ndarray, n: int) -> list:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order[:n]]


def retrieve_topn(query_tokens, kb: KnowledgeBase, n: int) -> RetrievalResult:
    if n < 1:
        raise ValueError("n must be at least 1")
    if len(kb) == 0:
        raise ValueError("knowledge base is empty")
    return RetrievalResult(_rank(kb.ids, kb.scores(embed(query_tokens)), n))


def build_similarity_index(kb: KnowledgeBase, n: int = 10) -> dict[str, list[str]]:
    """For every chunk, its ``n`` most similar other chunks, most similar first."""
    if n < 0:
        raise ValueError("n must be non-negative")
    ids = kb.ids
    index: dict[str, list[str]] = {}
    for i, cid in enumerate(ids):
        if n == 0:
            index[cid] = []
            continue
        scores = kb.scores(kb[cid].embedding)
        others = [j for j in range(len(ids)) if j != i]
        ranked = sorted(others, key=lambda j: (-scores[j], ids[j]))[:n]
        index[cid] = [ids[j] for j in ranked]
    return index


def split_tokens(tokens, window: int = 128) -> list[np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if window < 1:
        raise ValueError("window must be positive")
    return [tokens[i:i + window] for i in range(0, len(tokens), window)]


def load_corpus_jsonl(path, window: int | None = None) -> list[Chunk]:
    """One JSON object per line: ``{"id": optional str, "text": str}``.

    With ``window`` set, long texts are split into fixed-size token windows.
    """
    chunks = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        ext = obj.get("id")
        tokens = tokenize(obj["text"])
        if window is None:
            chunks.append(Chunk.from_tokens(tokens, ext))
        else:
            for j, part in enumerate(split_tokens(tokens, window)):
                chunks.append(Chunk.from_tokens(part, None if ext is None else f"{ext}#{j}"))
    return chunks


def write_corpus_jsonl(chunks, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for c in chunks:
            obj = {"text": c.text.decode("utf-8", errors="replace")}
            if c.external_id is not None:
                obj = {"id": c.external_id, **obj}
            f.write(json.dumps(obj) + "\n")


def load_qa_jsonl(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            if not obj.get("answers"):
                raise ValueError("every QA example needs at least one gold answer")
            out.append(obj)
    return out
