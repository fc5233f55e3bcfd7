"""Retrieval strategies over the built indexes.

Three strategies share one result shape:

* naive:  embed the query, take the top-k by cosine similarity
* rerank: vector top-candidate_k, cross-encoder scores, keep final_k
* hybrid: vector and keyword candidate sets fused by OR (union) or AND
          (intersection), then reranked and truncated like `rerank`

An AND fusion that intersects to nothing degrades to OR so the agent always
receives context; the result records that fallback. Ties break by ascending
chunk_id everywhere, which keeps runs reproducible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .indexing import IndexBundle, keyword_search, vector_search

logger = logging.getLogger(__name__)

STRATEGIES = ("naive", "rerank", "hybrid")
FUSION_MODES = ("AND", "OR")
DEFAULT_FINAL_K = 4
DEFAULT_CANDIDATE_K = 20
DEFAULT_RERANK_BATCH = 32


class RerankError(RuntimeError):
    """Reranker failure, carrying the candidate ids that were being scored."""

    def __init__(self, message: str, candidate_ids: list[str]):
        super().__init__(message)
        self.candidate_ids = candidate_ids


@dataclass(frozen=True)
class RetrievalConfig:
    strategy: str = "naive"
    top_k_final: int = DEFAULT_FINAL_K
    candidate_k: int = DEFAULT_CANDIDATE_K
    fusion_mode: str = "OR"
    rerank_batch_size: int = DEFAULT_RERANK_BATCH

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy: {self.strategy!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode: {self.fusion_mode!r}")
        if self.top_k_final < 1:
            raise ValueError("top_k_final must be >= 1")
        if self.top_k_final > self.candidate_k:
            raise ValueError("top_k_final must not exceed candidate_k")
        if self.rerank_batch_size < 1:
            raise ValueError("rerank_batch_size must be >= 1")


@dataclass(frozen=True)
class RetrievedChunk:
    chunk_id: str
    score: float
    source: str
    text: str


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    strategy: str
    chunks: tuple[RetrievedChunk, ...]
    timing: float
    and_fallback: bool = False

    @property
    def chunk_ids(self) -> list[str]:
        return [c.chunk_id for c in self.chunks]

    @property
    def texts(self) -> list[str]:
        return [c.text for c in self.chunks]


def _embed_query(query: str, embedder) -> list[float]:
    if not query.strip():
        raise ValueError("empty query")
    try:
        return embedder.embed([query])[0]
    except ValueError:
        raise
    except Exception as exc:
        raise RuntimeError(f"query embedding failed: {exc}") from exc


def _resolve(bundle: IndexBundle, scored, source: str | None = None) -> tuple[RetrievedChunk, ...]:
    return tuple(
        RetrievedChunk(
            chunk_id=s.chunk_id,
            score=float(s.score),
            source=source or s.source,
            text=bundle.chunk_text(s.chunk_id),
        )
        for s in scored
    )


def _rerank_ids(
    query: str,
    candidate_ids: list[str],
    bundle: IndexBundle,
    reranker,
    final_k: int,
    batch_size: int,
) -> tuple[RetrievedChunk, ...]:
    """Cross-encoder scores each candidate; keep final_k by score descending."""
    ordered = sorted(candidate_ids)
    passages = [bundle.chunk_text(cid) for cid in ordered]
    try:
        scores = reranker.rerank_scores(query, passages, batch_size=batch_size)
    except Exception as exc:
        raise RerankError(f"reranking failed for {len(ordered)} candidates: {exc}", ordered) from exc
    ranked = sorted(zip(ordered, scores), key=lambda pair: (-pair[1], pair[0]))
    return tuple(
        RetrievedChunk(chunk_id=cid, score=float(s), source="reranker", text=bundle.chunk_text(cid))
        for cid, s in ranked[:final_k]
    )


def fuse_candidate_ids(
    vector_ids: list[str], keyword_ids: list[str], fusion_mode: str
) -> tuple[set[str], bool]:
    """Combine the two candidate id sets; returns (fused set, and_fallback flag).

    OR takes the union. AND takes the intersection, but an empty intersection
    falls back to the union with the flag set.
    """
    if fusion_mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode: {fusion_mode!r}")
    vec, kw = set(vector_ids), set(keyword_ids)
    if fusion_mode == "OR":
        return vec | kw, False
    fused = vec & kw
    if fused:
        return fused, False
    logger.info("AND fusion produced an empty set; degrading to OR")
    return vec | kw, True


def retrieve_naive(query: str, bundle: IndexBundle, embedder, k: int = DEFAULT_FINAL_K) -> RetrievalResult:
    started = time.perf_counter()
    scored = vector_search(bundle.vector, _embed_query(query, embedder), k)
    return RetrievalResult(
        query=query,
        strategy="naive",
        chunks=_resolve(bundle, scored),
        timing=time.perf_counter() - started,
    )


def retrieve_rerank(
    query: str,
    bundle: IndexBundle,
    embedder,
    reranker,
    candidate_k: int = DEFAULT_CANDIDATE_K,
    final_k: int = DEFAULT_FINAL_K,
    rerank_batch_size: int = DEFAULT_RERANK_BATCH,
) -> RetrievalResult:
    if final_k > candidate_k:
        raise ValueError("final_k must not exceed candidate_k")
    started = time.perf_counter()
    candidates = vector_search(bundle.vector, _embed_query(query, embedder), candidate_k)
    chunks = _rerank_ids(
        query, [c.chunk_id for c in candidates], bundle, reranker, final_k, rerank_batch_size
    )
    return RetrievalResult(
        query=query,
        strategy="rerank",
        chunks=chunks,
        timing=time.perf_counter() - started,
    )


def retrieve_hybrid(
    query: str,
    bundle: IndexBundle,
    embedder,
    reranker,
    fusion_mode: str = "OR",
    candidate_k: int = DEFAULT_CANDIDATE_K,
    final_k: int = DEFAULT_FINAL_K,
    rerank_batch_size: int = DEFAULT_RERANK_BATCH,
) -> RetrievalResult:
    if final_k > candidate_k:
        raise ValueError("final_k must not exceed candidate_k")
    started = time.perf_counter()
    query_vec = _embed_query(query, embedder)
    vector_ids = [c.chunk_id for c in vector_search(bundle.vector, query_vec, candidate_k)]
    keyword_ids = [c.chunk_id for c in keyword_search(bundle.keyword, query, candidate_k)]
    fused, and_fallback = fuse_candidate_ids(vector_ids, keyword_ids, fusion_mode)
    chunks = _rerank_ids(query, sorted(fused), bundle, reranker, final_k, rerank_batch_size)
    return RetrievalResult(
        query=query,
        strategy="hybrid",
        chunks=chunks,
        timing=time.perf_counter() - started,
        and_fallback=and_fallback,
    )


def retrieve(query: str, bundle: IndexBundle, config: RetrievalConfig, embedder, reranker) -> RetrievalResult:
    """Dispatch to the configured strategy."""
    if config.strategy == "naive":
        return retrieve_naive(query, bundle, embedder, k=config.top_k_final)
    if config.strategy == "rerank":
        return retrieve_rerank(
            query,
            bundle,
            embedder,
            reranker,
            candidate_k=config.candidate_k,
            final_k=config.top_k_final,
            rerank_batch_size=config.rerank_batch_size,
        )
    return retrieve_hybrid(
        query,
        bundle,
        embedder,
        reranker,
        fusion_mode=config.fusion_mode,
        candidate_k=config.candidate_k,
        final_k=config.top_k_final,
        rerank_batch_size=config.rerank_batch_size,
    )
