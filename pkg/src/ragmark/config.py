"""Run configuration: one JSON document wiring corpus, dataset, models, runs.

The `models.backend` switch selects either the deterministic offline mocks
(`"mock"`, the default) or HTTP clients (`"http"`). Endpoint URLs can be
overridden per role through environment variables, which beat both the config
file and command-line flags:

    RAGMARK_EMBEDDER_URL  RAGMARK_RERANKER_URL
    RAGMARK_GENERATOR_URL RAGMARK_JUDGE_URL

With backend "http", a missing reranker endpoint falls back to scoring
passages through the generation endpoint, and a missing judge endpoint
reuses the generator endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .agent import DEFAULT_MAX_ITERATIONS, DEFAULT_OBSERVATION_CHAR_BUDGET, get_profile
from .assets import set_prompt_overrides_dir
from .corpus import DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP
from .evaluation import Configuration
from .metrics import DEFAULT_ANSWER_BLEND, DEFAULT_MATCH_THRESHOLD, override_metric_specs
from .modelgw import (
    HttpEmbeddingClient,
    HttpGenerationClient,
    HttpRerankClient,
    LLMRerankAdapter,
    MockEmbedder,
    MockLLM,
    MockReranker,
    ModelEndpointConfig,
    PortSet,
)
from .retrieval import (
    DEFAULT_CANDIDATE_K,
    DEFAULT_FINAL_K,
    DEFAULT_RERANK_BATCH,
    RetrievalConfig,
)

logger = logging.getLogger(__name__)

_ENV_URLS = {
    "embedder": "RAGMARK_EMBEDDER_URL",
    "reranker": "RAGMARK_RERANKER_URL",
    "generator": "RAGMARK_GENERATOR_URL",
    "judge": "RAGMARK_JUDGE_URL",
}


@dataclass
class RunConfig:
    corpus_dir: str = "corpus"
    dataset_path: str = "dataset.jsonl"
    output_dir: str = "ragmark_out"
    index_snapshot_path: str | None = None  # default: <output_dir>/index.json
    seed: int = 0
    workers: int = 1
    allow_drafts: bool = False
    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    top_k_final: int = DEFAULT_FINAL_K
    candidate_k: int = DEFAULT_CANDIDATE_K
    rerank_batch_size: int = DEFAULT_RERANK_BATCH
    configurations: list[dict] = field(
        default_factory=lambda: [
            {"strategy": "naive", "agent_profile": "react_base"},
            {"strategy": "rerank", "agent_profile": "react_base"},
            {"strategy": "hybrid", "fusion_mode": "OR", "agent_profile": "react_base"},
            {"strategy": "naive", "agent_profile": "react_custom"},
            {"strategy": "rerank", "agent_profile": "react_custom"},
            {"strategy": "hybrid", "fusion_mode": "OR", "agent_profile": "react_custom"},
        ]
    )
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    observation_char_budget: int = DEFAULT_OBSERVATION_CHAR_BUDGET
    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    answer_blend: float = DEFAULT_ANSWER_BLEND
    metric_weights: dict[str, float] = field(default_factory=dict)
    metric_thresholds: dict[str, float] = field(default_factory=dict)
    prompt_overrides_dir: str | None = None
    models: dict = field(default_factory=lambda: {"backend": "mock"})

    @property
    def snapshot_path(self) -> Path:
        if self.index_snapshot_path:
            return Path(self.index_snapshot_path)
        return Path(self.output_dir) / "index.json"

    @property
    def records_path(self) -> Path:
        return Path(self.output_dir) / "records.jsonl"


_NESTED_KEYS = {
    "chunking": {"chunk_size", "overlap"},
    "retrieval": {"top_k_final", "candidate_k", "rerank_batch_size"},
    "agent": {"max_iterations", "observation_char_budget"},
    "metrics": {"match_threshold", "answer_blend", "weights", "thresholds"},
}

_TOP_KEYS = {
    "corpus_dir",
    "dataset_path",
    "output_dir",
    "index_snapshot_path",
    "seed",
    "workers",
    "allow_drafts",
    "configurations",
    "prompt_overrides_dir",
    "models",
}


def parse_config(payload: dict) -> RunConfig:
    """Build a RunConfig from the JSON document, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(payload) - _TOP_KEYS - set(_NESTED_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    config = RunConfig()
    for key in _TOP_KEYS:
        if key in payload:
            setattr(config, key, payload[key])
    for section, keys in _NESTED_KEYS.items():
        block = payload.get(section, {})
        if not isinstance(block, dict):
            raise ValueError(f"config section {section!r} must be an object")
        bad = set(block) - keys
        if bad:
            raise ValueError(f"unknown keys in config section {section!r}: {', '.join(sorted(bad))}")
        for key in keys:
            if key in block:
                if section == "metrics" and key in ("weights", "thresholds"):
                    setattr(config, f"metric_{key}", block[key])
                else:
                    setattr(config, key, block[key])
    if not config.configurations:
        raise ValueError("config must list at least one configuration")
    if config.workers < 1:
        raise ValueError("workers must be >= 1")
    return config


def load_config(path: str | Path) -> RunConfig:
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"config file not found: {file_path}")
    try:
        payload = json.loads(file_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file is not valid JSON: {file_path} ({exc})") from exc
    return parse_config(payload)


def apply_config_side_effects(config: RunConfig) -> None:
    """Install process-wide settings: prompt overrides and metric overrides."""
    set_prompt_overrides_dir(config.prompt_overrides_dir)
    if config.metric_weights or config.metric_thresholds:
        override_metric_specs(
            weights=config.metric_weights or None, thresholds=config.metric_thresholds or None
        )


def build_configurations(config: RunConfig) -> list[Configuration]:
    configurations = []
    for row in config.configurations:
        if not isinstance(row, dict):
            raise ValueError("each configuration must be an object")
        retrieval = RetrievalConfig(
            strategy=row.get("strategy", "naive"),
            top_k_final=row.get("top_k_final", config.top_k_final),
            candidate_k=row.get("candidate_k", config.candidate_k),
            fusion_mode=row.get("fusion_mode", "OR"),
            rerank_batch_size=config.rerank_batch_size,
        )
        profile = get_profile(
            row.get("agent_profile", "react_base"),
            max_iterations=config.max_iterations,
            overrides_dir=config.prompt_overrides_dir,
        )
        configurations.append(Configuration(retrieval=retrieval, profile=profile))
    ids = [c.configuration_id for c in configurations]
    duplicates = {i for i in ids if ids.count(i) > 1}
    if duplicates:
        raise ValueError(f"duplicate configurations: {', '.join(sorted(duplicates))}")
    return configurations


def _endpoint_from(block: dict, role: str, default_temperature: float) -> ModelEndpointConfig:
    base_url = os.environ.get(_ENV_URLS[role]) or block.get("base_url")
    if not base_url:
        raise ValueError(f"models.{role}.base_url missing (or set {_ENV_URLS[role]})")
    return ModelEndpointConfig(
        base_url=base_url,
        model_name=block.get("model_name", role),
        temperature=block.get("temperature", default_temperature),
        timeout=block.get("timeout", 60.0),
        max_retries=block.get("max_retries", 2),
    )


def build_ports(config: RunConfig) -> PortSet:
    """Instantiate the four model ports per the `models` config block."""
    models = config.models or {}
    backend = models.get("backend", "mock")
    if backend == "mock":
        embedder = MockEmbedder(dim=models.get("embedding_dim", 16), seed=config.seed)
        llm = MockLLM(seed=config.seed)
        return PortSet(embedder=embedder, reranker=MockReranker(), generator=llm, judge=llm)
    if backend != "http":
        raise ValueError(f"unknown models.backend: {backend!r} (expected mock or http)")

    limiter = threading.Semaphore(models.get("max_inflight", 4))
    embedder = HttpEmbeddingClient(
        _endpoint_from(models.get("embedder", {}), "embedder", 0.0), limiter
    )
    generator = HttpGenerationClient(
        _endpoint_from(models.get("generator", {}), "generator", 0.1), limiter
    )
    judge_block = models.get("judge")
    if judge_block or os.environ.get(_ENV_URLS["judge"]):
        judge = HttpGenerationClient(_endpoint_from(judge_block or {}, "judge", 0.1), limiter)
    else:
        logger.info("no judge endpoint configured; judging through the generator endpoint")
        judge = generator
    reranker_block = models.get("reranker")
    if reranker_block or os.environ.get(_ENV_URLS["reranker"]):
        reranker = HttpRerankClient(_endpoint_from(reranker_block or {}, "reranker", 0.0), limiter)
    else:
        logger.info("no reranker endpoint configured; reranking through the generator endpoint")
        reranker = LLMRerankAdapter(generator)
    return PortSet(embedder=embedder, reranker=reranker, generator=generator, judge=judge)
