"""Evaluation orchestration: run agents over a QA dataset, score, aggregate.

For every (QA pair x configuration) the runner executes the agent, computes
all nine metrics, blends them into a weighted aggregate, and applies the pass
verdict: at least 6 of the 8 primary metrics (completeness_gain excluded)
must clear their thresholds. Records stream to an append-only JSON-lines
file as they complete, keyed by (qa_id, configuration_id), so an interrupted
run resumes by skipping what the file already holds.

Records with an infrastructure failure (agent transport error, judge that
stayed unparseable) carry an error_status instead of scores; the report
counts them in an error tally and excludes them from means and pass rates.
All serialization uses sorted keys and fixed separators, so a fully mock-
backed run is byte-reproducible.
"""

from __future__ import annotations

import json
import logging
import statistics
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .agent import AgentProfile, AgentTrace, run_agent, DEFAULT_OBSERVATION_CHAR_BUDGET
from .dataset import QAPair
from .indexing import IndexBundle
from .metrics import (
    DEFAULT_ANSWER_BLEND,
    DEFAULT_MATCH_THRESHOLD,
    METRIC_SPECS,
    MetricScore,
    PRIMARY_METRICS,
    compute_metrics,
    numerical_accuracy,
)
from .modelgw import PortSet
from .retrieval import RetrievalConfig, RetrievalResult, retrieve

logger = logging.getLogger(__name__)

PASS_REQUIREMENT = 6
BANDS = ("excellent", "good", "fair", "poor")


@dataclass(frozen=True)
class Configuration:
    """One evaluated condition: a retrieval strategy paired with an agent profile."""

    retrieval: RetrievalConfig
    profile: AgentProfile

    @property
    def configuration_id(self) -> str:
        base = self.retrieval.strategy
        if base == "hybrid":
            base = f"hybrid-{self.retrieval.fusion_mode.lower()}"
        return f"{base}-{self.profile.name}"


@dataclass(frozen=True)
class EvaluationRecord:
    qa_id: str
    configuration_id: str
    question: str
    ground_truth: str
    response: str
    trace: AgentTrace | None
    metric_scores: dict[str, MetricScore]
    numerical_accuracy: float | None
    aggregate_score: float | None
    verdict: str | None
    error_status: str | None = None


def aggregate_score(values: dict[str, float]) -> float:
    """Weighted sum of all nine metric values; weights sum to 1."""
    total = 0.0
    for metric_id, spec in METRIC_SPECS.items():
        if metric_id not in values:
            raise ValueError(f"missing metric: {metric_id}")
        value = values[metric_id]
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"metric {metric_id} value {value} outside [0, 1]")
        total += spec.weight * value
    return total


def verdict(scores: dict[str, MetricScore]) -> str:
    """Pass iff at least 6 of the 8 primary metrics passed; completeness_gain ignored."""
    for metric_id in PRIMARY_METRICS:
        if metric_id not in scores:
            raise ValueError(f"missing primary metric: {metric_id}")
    passed = sum(1 for m in PRIMARY_METRICS if scores[m].passed is True)
    return "pass" if passed >= PASS_REQUIREMENT else "fail"


def classify_band(metric_id: str, value: float) -> str:
    """Quality band for a score; exact boundaries land in the lower band.

    Standard scale: excellent > 0.8, good [0.6, 0.8], fair [0.4, 0.6), else
    poor. semantic_f1 uses its own cutoffs 0.7 / 0.5 / 0.2.
    """
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"value {value} outside [0, 1]")
    hi, mid, lo = (0.7, 0.5, 0.2) if metric_id == "semantic_f1" else (0.8, 0.6, 0.4)
    if value > hi:
        return "excellent"
    if value >= mid:
        return "good"
    if value >= lo:
        return "fair"
    return "poor"


# --------------------------------------------------------------------------
# Record serialization (JSON-lines; timing fields deliberately excluded so
# repeated mock runs produce identical bytes)
# --------------------------------------------------------------------------


def _retrieval_payload(result: RetrievalResult) -> dict:
    return {
        "query": result.query,
        "strategy": result.strategy,
        "and_fallback": result.and_fallback,
        "chunks": [
            {"chunk_id": c.chunk_id, "score": c.score, "source": c.source, "text": c.text}
            for c in result.chunks
        ],
    }


def _trace_payload(trace: AgentTrace) -> dict:
    return {
        "profile": trace.profile_name,
        "final_answer": trace.final_answer,
        "iterations_used": trace.iterations_used,
        "terminated_by": trace.terminated_by,
        "parse_failure": trace.parse_failure,
        "steps": [
            {
                "thought": s.thought,
                "action": list(s.action) if s.action else None,
                "observation": s.observation,
                "confidence": s.confidence,
            }
            for s in trace.steps
        ],
    }


def record_payload(record: EvaluationRecord) -> dict:
    return {
        "qa_id": record.qa_id,
        "configuration_id": record.configuration_id,
        "question": record.question,
        "ground_truth": record.ground_truth,
        "response": record.response,
        "agent_trace": _trace_payload(record.trace) if record.trace else None,
        "retrieval": [_retrieval_payload(r) for r in record.trace.retrievals] if record.trace else [],
        "metric_scores": {
            m: {"value": s.value, "passed": s.passed, "failed": s.failed, "evidence": s.evidence}
            for m, s in record.metric_scores.items()
        },
        "numerical_accuracy": record.numerical_accuracy,
        "aggregate_score": record.aggregate_score,
        "verdict": record.verdict,
        "error_status": record.error_status,
    }


def record_to_json(record: EvaluationRecord) -> str:
    return json.dumps(record_payload(record), sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------
# Single-record evaluation
# --------------------------------------------------------------------------


def evaluate_pair(
    pair: QAPair,
    configuration: Configuration,
    bundle: IndexBundle,
    ports: PortSet,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
    observation_char_budget: int = DEFAULT_OBSERVATION_CHAR_BUDGET,
    answer_blend: float = DEFAULT_ANSWER_BLEND,
) -> EvaluationRecord:
    """Agent run plus all metrics for one QA pair under one configuration.

    Infrastructure failures become an error record; they never raise.
    """
    cid = configuration.configuration_id
    try:
        def retriever(query: str) -> RetrievalResult:
            return retrieve(query, bundle, configuration.retrieval, ports.embedder, ports.reranker)

        trace = run_agent(
            pair.question,
            configuration.profile,
            retriever,
            ports.generator,
            observation_char_budget=observation_char_budget,
        )
    except Exception as exc:
        logger.warning("agent failed for qa_id=%s configuration=%s: %s", pair.qa_id, cid, exc)
        return EvaluationRecord(
            qa_id=pair.qa_id,
            configuration_id=cid,
            question=pair.question,
            ground_truth=pair.ground_truth,
            response="",
            trace=None,
            metric_scores={},
            numerical_accuracy=None,
            aggregate_score=None,
            verdict=None,
            error_status=f"agent_failure: {type(exc).__name__}: {exc}",
        )

    # Context for the metrics: every chunk the agent saw, first occurrence wins.
    seen: set[str] = set()
    context_chunks: list[str] = []
    for result in trace.retrievals:
        for chunk in result.chunks:
            if chunk.chunk_id not in seen:
                seen.add(chunk.chunk_id)
                context_chunks.append(chunk.text)

    scores = compute_metrics(
        pair.question,
        trace.final_answer,
        pair.ground_truth,
        context_chunks,
        ports.judge,
        ports.embedder,
        match_threshold=match_threshold,
        answer_blend=answer_blend,
    )
    failed = sorted(m for m, s in scores.items() if s.failed)
    if failed:
        return EvaluationRecord(
            qa_id=pair.qa_id,
            configuration_id=cid,
            question=pair.question,
            ground_truth=pair.ground_truth,
            response=trace.final_answer,
            trace=trace,
            metric_scores=scores,
            numerical_accuracy=numerical_accuracy(trace.final_answer, pair.ground_truth),
            aggregate_score=None,
            verdict=None,
            error_status="metric_failure: " + ",".join(failed),
        )
    return EvaluationRecord(
        qa_id=pair.qa_id,
        configuration_id=cid,
        question=pair.question,
        ground_truth=pair.ground_truth,
        response=trace.final_answer,
        trace=trace,
        metric_scores=scores,
        numerical_accuracy=numerical_accuracy(trace.final_answer, pair.ground_truth),
        aggregate_score=aggregate_score({m: s.value for m, s in scores.items()}),
        verdict=verdict(scores),
    )


# --------------------------------------------------------------------------
# Run orchestration with resume
# --------------------------------------------------------------------------


def load_completed_keys(records_path: str | Path) -> set[tuple[str, str]]:
    """Keys of records already present in an existing records file.

    Corrupt lines (for example a partial write from an interrupted run) are
    skipped with a warning; their records get recomputed.
    """
    keys: set[tuple[str, str]] = set()
    for row in load_records(records_path, missing_ok=True):
        keys.add((row["qa_id"], row["configuration_id"]))
    return keys


def run_evaluation(
    pairs: list[QAPair],
    configurations: list[Configuration],
    bundle: IndexBundle,
    ports: PortSet,
    records_path: str | Path,
    workers: int = 1,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
    observation_char_budget: int = DEFAULT_OBSERVATION_CHAR_BUDGET,
    answer_blend: float = DEFAULT_ANSWER_BLEND,
) -> tuple[list[dict], dict]:
    """Evaluate every (pair x configuration) not yet in the records file.

    Tasks run on up to `workers` threads but are written in task order, so
    the file's line order never depends on scheduling. Returns all records
    (including pre-existing ones) re-read from the file, plus the report
    built from them.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if not pairs:
        raise ValueError("dataset has no QA pairs")
    if not configurations:
        raise ValueError("no configurations to evaluate")
    seen_ids = {c.configuration_id for c in configurations}
    if len(seen_ids) != len(configurations):
        raise ValueError("duplicate configuration_id in configurations")

    done = load_completed_keys(records_path)
    tasks = [
        (pair, config)
        for config in configurations
        for pair in pairs
        if (pair.qa_id, config.configuration_id) not in done
    ]
    logger.info("evaluating %d records (%d already present)", len(tasks), len(done))

    lock = threading.Lock()
    path = Path(records_path)
    # A crash can leave a partial final line; never append onto it.
    if path.exists() and path.stat().st_size:
        with path.open("rb") as existing:
            existing.seek(-1, 2)
            needs_newline = existing.read(1) != b"\n"
        if needs_newline:
            with path.open("a", encoding="utf-8") as fix:
                fix.write("\n")

    with path.open("a", encoding="utf-8") as out:
        pool = ThreadPoolExecutor(max_workers=workers)
        try:
            futures = [
                pool.submit(
                    evaluate_pair,
                    pair,
                    config,
                    bundle,
                    ports,
                    match_threshold,
                    observation_char_budget,
                    answer_blend,
                )
                for pair, config in tasks
            ]
            for future in futures:
                record = future.result()
                with lock:
                    out.write(record_to_json(record) + "\n")
                    out.flush()
        except BaseException:
            # Graceful drain: keep what finished, drop what never started.
            pool.shutdown(wait=True, cancel_futures=True)
            raise
        pool.shutdown(wait=True)

    records = load_records(path)
    return records, build_report(records)


def load_records(records_path: str | Path, missing_ok: bool = False) -> list[dict]:
    """Parsed record lines; corrupt lines are skipped with a warning."""
    path = Path(records_path)
    if missing_ok and not path.exists():
        return []
    records = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("skipping corrupt record at %s:%d", path, lineno)
                continue
            if not isinstance(row, dict) or "qa_id" not in row or "configuration_id" not in row:
                logger.warning("skipping malformed record at %s:%d", path, lineno)
                continue
            records.append(row)
    return records


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def build_report(records: list[dict]) -> dict:
    """Per-configuration statistics over a set of serialized records."""
    by_config: dict[str, list[dict]] = {}
    for record in records:
        by_config.setdefault(record["configuration_id"], []).append(record)

    configurations = {}
    for cid in sorted(by_config):
        rows = by_config[cid]
        scored = [r for r in rows if r["error_status"] is None]
        passes = sum(1 for r in scored if r["verdict"] == "pass")
        aggregates = [r["aggregate_score"] for r in scored]
        metric_failures = sum(
            1 for r in rows for s in r["metric_scores"].values() if s["failed"]
        )

        metrics = {}
        for metric_id in METRIC_SPECS:
            values = [
                r["metric_scores"][metric_id]["value"]
                for r in rows
                if metric_id in r["metric_scores"] and not r["metric_scores"][metric_id]["failed"]
            ]
            failures = sum(
                1
                for r in rows
                if metric_id in r["metric_scores"] and r["metric_scores"][metric_id]["failed"]
            )
            bands = {band: 0 for band in BANDS}
            for v in values:
                bands[classify_band(metric_id, v)] += 1
            metrics[metric_id] = {
                "mean": _mean(values),
                "pass_rate": _mean(
                    [
                        1.0 if r["metric_scores"][metric_id]["passed"] else 0.0
                        for r in rows
                        if metric_id in r["metric_scores"]
                        and not r["metric_scores"][metric_id]["failed"]
                    ]
                ),
                "failures": failures,
                "bands": bands,
            }

        aggregate_bands = {band: 0 for band in BANDS}
        for v in aggregates:
            aggregate_bands[classify_band("aggregate", v)] += 1

        numeric_values = [
            r["numerical_accuracy"] for r in scored if r["numerical_accuracy"] is not None
        ]
        configurations[cid] = {
            "records": len(rows),
            "scored": len(scored),
            "errors": len(rows) - len(scored),
            "metric_failures": metric_failures,
            "pass_rate": passes / len(scored) if scored else None,
            "aggregate_mean": _mean(aggregates),
            "aggregate_stdev": statistics.pstdev(aggregates) if aggregates else None,
            "aggregate_bands": aggregate_bands,
            "numerical_accuracy_mean": _mean(numeric_values),
            "metrics": metrics,
        }

    total_scored = sum(c["scored"] for c in configurations.values())
    total_passes = sum(
        1 for r in records if r["error_status"] is None and r["verdict"] == "pass"
    )
    return {
        "tool_version": __version__,
        "configurations": configurations,
        "totals": {
            "records": len(records),
            "scored": total_scored,
            "errors": len(records) - total_scored,
            "pass_rate": total_passes / total_scored if total_scored else None,
        },
    }


def write_report(report: dict, out_dir: str | Path) -> dict[str, Path]:
    """Write report.json plus the three CSV tables; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json"}
    paths["report"].write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )

    def fmt(value: float | None) -> str:
        return "" if value is None else f"{value:.6f}"

    lines = ["configuration_id,metric_id,mean"]
    for cid, config in sorted(report["configurations"].items()):
        for metric_id in sorted(METRIC_SPECS):
            lines.append(f"{cid},{metric_id},{fmt(config['metrics'][metric_id]['mean'])}")
    paths["metrics_means"] = out / "metrics_means.csv"
    paths["metrics_means"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["configuration_id,metric_id,pass_rate"]
    for cid, config in sorted(report["configurations"].items()):
        lines.append(f"{cid},overall,{fmt(config['pass_rate'])}")
        for metric_id in sorted(METRIC_SPECS):
            lines.append(f"{cid},{metric_id},{fmt(config['metrics'][metric_id]['pass_rate'])}")
    paths["pass_rates"] = out / "pass_rates.csv"
    paths["pass_rates"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["configuration_id,metric_id,band,count"]
    for cid, config in sorted(report["configurations"].items()):
        for band in BANDS:
            lines.append(f"{cid},aggregate,{band},{config['aggregate_bands'][band]}")
        for metric_id in sorted(METRIC_SPECS):
            for band in BANDS:
                lines.append(f"{cid},{metric_id},{band},{config['metrics'][metric_id]['bands'][band]}")
    paths["bands"] = out / "bands.csv"
    paths["bands"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths
