"""Dense vector index and BM25 keyword index over corpus chunks.

Both indexes are exact and in-memory. The vector side stores unit-normalized
embeddings, so cosine similarity reduces to a dot product; the keyword side is
standard BM25 with the nonnegative IDF variant ln((N - n + 0.5)/(n + 0.5) + 1).
Corpora here are hundreds of chunks, which makes exhaustive search both fast
enough and trivially correct. A built pair of indexes is immutable and can be
queried concurrently.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Chunk, content_tokens

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = "RAGMARK_INDEX"
SNAPSHOT_VERSION = 1
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
_EMBED_BATCH = 64


@dataclass(frozen=True)
class ScoredChunk:
    chunk_id: str
    score: float
    source: str  # one of: vector, keyword, reranker, fused

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for chunk {self.chunk_id}")


class VectorIndex:
    """Exhaustive cosine-similarity index over unit-normalized embeddings."""

    def __init__(self, chunk_ids: Sequence[str], vectors: np.ndarray):
        if vectors.ndim != 2 or vectors.shape[0] != len(chunk_ids):
            raise ValueError("vectors must be a (len(chunk_ids), d) matrix")
        self.chunk_ids = list(chunk_ids)
        self.matrix = vectors.astype(np.float64)
        self.dimension = int(vectors.shape[1])

    def __len__(self) -> int:
        return len(self.chunk_ids)


@dataclass
class KeywordIndex:
    """BM25 postings over lowercased word tokens."""

    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    corpus_size: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    def idf(self, term: str) -> float:
        n_t = len(self.postings.get(term, ()))
        return math.log((self.corpus_size - n_t + 0.5) / (n_t + 0.5) + 1.0)


def _normalize_rows(matrix: np.ndarray, chunk_ids: Sequence[str]) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    for i, norm in enumerate(norms):
        if norm < 1e-12:
            raise ValueError(f"embedding for chunk {chunk_ids[i]} has zero norm")
    return matrix / norms[:, np.newaxis]


def build_indexes(chunks: Sequence[Chunk], embedder) -> tuple[VectorIndex, KeywordIndex]:
    """Embed every chunk and build both indexes over the same chunk ids."""
    if not chunks:
        raise ValueError("empty corpus: no chunks to index")
    seen: set[str] = set()
    for chunk in chunks:
        if chunk.chunk_id in seen:
            raise ValueError(f"duplicate chunk_id: {chunk.chunk_id}")
        seen.add(chunk.chunk_id)

    chunk_ids = [c.chunk_id for c in chunks]
    rows: list[list[float]] = []
    for start in range(0, len(chunks), _EMBED_BATCH):
        batch = chunks[start : start + _EMBED_BATCH]
        try:
            rows.extend(embedder.embed([c.text for c in batch]))
        except Exception as exc:
            raise RuntimeError(
                f"embedding failed for chunks {batch[0].chunk_id}..{batch[-1].chunk_id}: {exc}"
            ) from exc
    matrix = np.asarray(rows, dtype=np.float64)
    vec_index = VectorIndex(chunk_ids, _normalize_rows(matrix, chunk_ids))

    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    for chunk in chunks:
        tokens = content_tokens(chunk.text)
        doc_lengths[chunk.chunk_id] = len(tokens)
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((chunk.chunk_id, tf))
    avg_len = sum(doc_lengths.values()) / len(doc_lengths)
    kw_index = KeywordIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_doc_length=avg_len,
        corpus_size=len(chunks),
    )
    logger.info(
        "built indexes: %d chunks, dim=%d, %d distinct terms",
        len(chunks), vec_index.dimension, len(postings),
    )
    return vec_index, kw_index


def vector_search(index: VectorIndex, query_embedding: Sequence[float], k: int) -> list[ScoredChunk]:
    """Top-k chunks by cosine similarity, ties broken by ascending chunk_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query_embedding, dtype=np.float64)
    if query.shape != (index.dimension,):
        raise ValueError(f"query dimension {query.shape} does not match index dimension {index.dimension}")
    norm = float(np.linalg.norm(query))
    if norm > 1e-12:
        query = query / norm
    scores = index.matrix @ query
    ranked = sorted(zip(index.chunk_ids, scores), key=lambda pair: (-pair[1], pair[0]))
    return [ScoredChunk(chunk_id=cid, score=float(s), source="vector") for cid, s in ranked[:k]]


def keyword_search(index: KeywordIndex, query_text: str, k: int) -> list[ScoredChunk]:
    """Top-k chunks by BM25, zero-score chunks omitted.

    Each occurrence of a term in the query contributes its full per-term score,
    so repeated query terms weigh proportionally.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[str, float] = {}
    for term in content_tokens(query_text):
        rows = index.postings.get(term)
        if not rows:
            continue
        idf = index.idf(term)
        for chunk_id, tf in rows:
            length_norm = 1.0 - index.b + index.b * index.doc_lengths[chunk_id] / index.avg_doc_length
            scores[chunk_id] = scores.get(chunk_id, 0.0) + idf * tf * (index.k1 + 1.0) / (
                tf + index.k1 * length_norm
            )
    ranked = sorted(
        ((cid, s) for cid, s in scores.items() if s > 0.0),
        key=lambda pair: (-pair[1], pair[0]),
    )
    return [ScoredChunk(chunk_id=cid, score=s, source="keyword") for cid, s in ranked[:k]]


# --------------------------------------------------------------------------
# Snapshot persistence (written by `ingest`, read by `run`)
# --------------------------------------------------------------------------


@dataclass
class IndexBundle:
    """Everything `run` needs from `ingest`: chunk texts plus both indexes."""

    chunks: dict[str, Chunk]
    vector: VectorIndex
    keyword: KeywordIndex

    def chunk_text(self, chunk_id: str) -> str:
        return self.chunks[chunk_id].text


def save_snapshot(path: str | Path, chunks: Sequence[Chunk], vector: VectorIndex, keyword: KeywordIndex) -> None:
    payload = {
        "magic": SNAPSHOT_MAGIC,
        "version": SNAPSHOT_VERSION,
        "chunks": [
            {
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "text": c.text,
                "token_span": list(c.token_span),
                "token_count": c.token_count,
            }
            for c in chunks
        ],
        "vector": {
            "dimension": vector.dimension,
            "chunk_ids": vector.chunk_ids,
            "rows": [[float(x) for x in row] for row in vector.matrix],
        },
        "keyword": {
            "k1": keyword.k1,
            "b": keyword.b,
            "doc_lengths": keyword.doc_lengths,
            "postings": {term: [[cid, tf] for cid, tf in rows] for term, rows in keyword.postings.items()},
        },
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def load_snapshot(path: str | Path) -> IndexBundle:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"index snapshot not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"index snapshot is not valid JSON: {path} ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("magic") != SNAPSHOT_MAGIC:
        raise ValueError(f"not an index snapshot: {path}")
    if payload.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {payload.get('version')} in {path}")

    chunks = {
        row["chunk_id"]: Chunk(
            chunk_id=row["chunk_id"],
            doc_id=row["doc_id"],
            text=row["text"],
            token_span=tuple(row["token_span"]),
            token_count=row["token_count"],
        )
        for row in payload["chunks"]
    }
    vec = payload["vector"]
    vector = VectorIndex(vec["chunk_ids"], np.asarray(vec["rows"], dtype=np.float64))
    kw = payload["keyword"]
    doc_lengths = {cid: int(n) for cid, n in kw["doc_lengths"].items()}
    keyword = KeywordIndex(
        postings={term: [(cid, int(tf)) for cid, tf in rows] for term, rows in kw["postings"].items()},
        doc_lengths=doc_lengths,
        avg_doc_length=sum(doc_lengths.values()) / len(doc_lengths),
        corpus_size=len(doc_lengths),
        k1=float(kw["k1"]),
        b=float(kw["b"]),
    )
    return IndexBundle(chunks=chunks, vector=vector, keyword=keyword)
