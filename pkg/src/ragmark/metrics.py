"""The nine answer-quality metrics plus the separate numerical-accuracy check.

Two metrics are purely programmatic (token arithmetic over stop-word-filtered
vocabulary), four ask an LLM judge for a rubric score, and three mix judge
output with embedding similarity. Each metric returns a MetricScore whose
weight and threshold come from the fixed registry below; the weighted blend
and the pass verdict live in the evaluation module.

Judge calls follow one protocol: the rubric prompt demands a "Score: <0..1>"
line, an unparseable reply earns one retry with a format reminder, and a
second failure produces a failed-score sentinel that aggregates skip and
error tallies count. Infrastructure failure is never scored as a zero.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .assets import load_prompt, load_stopwords
from .corpus import content_tokens, split_sentences
from .modelgw import GenerationRequest, parse_score_line

logger = logging.getLogger(__name__)

DEFAULT_MATCH_THRESHOLD = 0.8
DEFAULT_ANSWER_BLEND = 0.5  # weight of the embedding cosine in answer_relevance


@dataclass(frozen=True)
class MetricSpec:
    metric_id: str
    weight: float
    threshold: float
    category: str  # programmatic, llm, or hybrid


METRIC_SPECS: dict[str, MetricSpec] = {
    spec.metric_id: spec
    for spec in (
        MetricSpec("key_terms_precision", 0.15, 0.7, "programmatic"),
        MetricSpec("token_recall", 0.15, 0.7, "programmatic"),
        MetricSpec("truthfulness", 0.20, 0.7, "llm"),
        MetricSpec("completeness", 0.10, 0.7, "llm"),
        MetricSpec("source_relevance", 0.05, 0.7, "llm"),
        MetricSpec("context_faithfulness", 0.10, 0.7, "llm"),
        MetricSpec("semantic_f1", 0.10, 0.6, "hybrid"),
        MetricSpec("answer_relevance", 0.10, 0.7, "hybrid"),
        MetricSpec("completeness_gain", 0.05, 0.501, "hybrid"),
    )
}

# completeness_gain is diagnostic; the pass verdict counts only these eight.
PRIMARY_METRICS = tuple(m for m in METRIC_SPECS if m != "completeness_gain")


def override_metric_specs(
    weights: dict[str, float] | None = None, thresholds: dict[str, float] | None = None
) -> None:
    """Replace registry weights or thresholds (run-config experiment hook).

    Overridden weights must still sum to 1.0 across all nine metrics.
    """
    for name, overrides in (("weight", weights), ("threshold", thresholds)):
        for metric_id, value in (overrides or {}).items():
            if metric_id not in METRIC_SPECS:
                raise ValueError(f"unknown metric in {name} overrides: {metric_id!r}")
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} override for {metric_id} outside [0, 1]: {value}")
    if weights:
        merged = {m: weights.get(m, s.weight) for m, s in METRIC_SPECS.items()}
        total = sum(merged.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"overridden weights sum to {total}, expected 1.0")
    for metric_id, spec in list(METRIC_SPECS.items()):
        new_weight = (weights or {}).get(metric_id, spec.weight)
        new_threshold = (thresholds or {}).get(metric_id, spec.threshold)
        if new_weight != spec.weight or new_threshold != spec.threshold:
            METRIC_SPECS[metric_id] = MetricSpec(metric_id, new_weight, new_threshold, spec.category)


@dataclass(frozen=True)
class MetricScore:
    metric_id: str
    value: float | None
    passed: bool | None
    evidence: dict
    failed: bool = False


@dataclass(frozen=True)
class JudgeVerdict:
    score: float
    rationale: str
    raw_output: str


class JudgeFailure(RuntimeError):
    """Judge output stayed unparseable (or the call failed) after one retry."""


def _score(metric_id: str, value: float, evidence: dict) -> MetricScore:
    value = min(1.0, max(0.0, float(value)))
    return MetricScore(
        metric_id=metric_id,
        value=value,
        passed=value >= METRIC_SPECS[metric_id].threshold,
        evidence=evidence,
    )


def _failed(metric_id: str, reason: str) -> MetricScore:
    logger.warning("metric %s failed to evaluate: %s", metric_id, reason)
    return MetricScore(metric_id=metric_id, value=None, passed=None, evidence={"error": reason}, failed=True)


def _non_stop_tokens(text: str) -> set[str]:
    stop = load_stopwords()
    return {t for t in content_tokens(text) if t not in stop}


# --------------------------------------------------------------------------
# Programmatic metrics
# --------------------------------------------------------------------------


def key_terms_precision(response: str, ground_truth: str, context: str) -> MetricScore:
    """Fraction of key terms the response mentions.

    Key terms are the non-stop-word tokens shared by the context and the
    ground truth; an empty key-term set scores 1.0 since nothing is missing.
    """
    if not ground_truth.strip():
        raise ValueError("ground_truth must be non-empty")
    key_terms = _non_stop_tokens(context) & _non_stop_tokens(ground_truth)
    if not key_terms:
        return _score("key_terms_precision", 1.0, {"key_terms": [], "matched": []})
    response_tokens = set(content_tokens(response))
    matched = key_terms & response_tokens
    return _score(
        "key_terms_precision",
        len(matched) / len(key_terms),
        {"key_terms": sorted(key_terms), "matched": sorted(matched)},
    )


def token_recall(response: str, ground_truth: str) -> MetricScore:
    """Fraction of the ground truth's unique non-stop tokens present in the response."""
    if not ground_truth.strip():
        raise ValueError("ground_truth must be non-empty")
    gt_tokens = _non_stop_tokens(ground_truth)
    if not gt_tokens:
        return _score("token_recall", 1.0, {"ground_truth_tokens": [], "matched": []})
    matched = gt_tokens & set(content_tokens(response))
    return _score(
        "token_recall",
        len(matched) / len(gt_tokens),
        {"ground_truth_tokens": sorted(gt_tokens), "matched": sorted(matched)},
    )


# --------------------------------------------------------------------------
# Judge protocol
# --------------------------------------------------------------------------

_RETRY_REMINDER = (
    '\n\nReminder: the first line of your reply must have exactly the form '
    '"Score: <number between 0 and 1>".'
)


def _call_judge(prompt: str, judge_llm) -> JudgeVerdict:
    """One rubric call with the retry-once protocol; raises JudgeFailure."""
    raw = ""
    for attempt, text in enumerate((prompt, prompt + _RETRY_REMINDER)):
        try:
            raw = judge_llm.generate(GenerationRequest(prompt=text)).text
        except Exception as exc:
            raise JudgeFailure(f"judge call failed: {exc}") from exc
        score = parse_score_line(raw)
        if score is not None:
            rationale = ""
            m = re.search(r"^Rationale:\s*(.*)$", raw, re.MULTILINE)
            if m:
                rationale = m.group(1).strip()
            return JudgeVerdict(score=score, rationale=rationale, raw_output=raw)
        if attempt == 0:
            logger.warning("judge reply had no Score line; retrying with format reminder")
    raise JudgeFailure(f"no Score line after retry; last output started: {raw[:80]!r}")


def _fill(template_name: str, **values: str) -> str:
    prompt = load_prompt(template_name)
    for key, value in values.items():
        prompt = prompt.replace("{" + key + "}", value)
    return prompt


_JUDGE_TEMPLATES = {
    "truthfulness": "judge_truthfulness",
    "completeness": "judge_completeness",
    "context_faithfulness": "judge_context_faithfulness",
}


def judge(
    metric_id: str,
    question: str,
    response: str,
    ground_truth: str,
    context_chunks: list[str],
    judge_llm,
) -> JudgeVerdict:
    """Run the rubric judge for one of the pure-LLM metrics."""
    if metric_id not in _JUDGE_TEMPLATES:
        raise ValueError(f"no judge rubric for metric {metric_id!r}")
    if metric_id == "context_faithfulness":
        prompt = _fill(
            _JUDGE_TEMPLATES[metric_id],
            question=question,
            context="\n\n".join(context_chunks),
            response=response,
        )
    else:
        prompt = _fill(
            _JUDGE_TEMPLATES[metric_id],
            question=question,
            reference=ground_truth,
            response=response,
        )
    return _call_judge(prompt, judge_llm)


def _judged_metric(
    metric_id: str,
    question: str,
    response: str,
    ground_truth: str,
    context_chunks: list[str],
    judge_llm,
) -> MetricScore:
    try:
        verdict = judge(metric_id, question, response, ground_truth, context_chunks, judge_llm)
    except JudgeFailure as exc:
        return _failed(metric_id, str(exc))
    return _score(metric_id, verdict.score, {"rationale": verdict.rationale})


def truthfulness(question, response, ground_truth, judge_llm) -> MetricScore:
    return _judged_metric("truthfulness", question, response, ground_truth, [], judge_llm)


def completeness(question, response, ground_truth, judge_llm) -> MetricScore:
    return _judged_metric("completeness", question, response, ground_truth, [], judge_llm)


def context_faithfulness(question, response, context_chunks, judge_llm) -> MetricScore:
    return _judged_metric("context_faithfulness", question, response, "", context_chunks, judge_llm)


def source_relevance(
    question: str, ground_truth: str, context_chunks: list[str], judge_llm
) -> MetricScore:
    """0.8 times the best chunk's relevance plus 0.2 times the mean relevance."""
    if not context_chunks:
        raise ValueError("source_relevance requires at least one chunk")
    scores = []
    try:
        for chunk in context_chunks:
            prompt = _fill(
                "judge_chunk_relevance",
                reference=ground_truth,
                question=question,
                passage=chunk,
            )
            scores.append(_call_judge(prompt, judge_llm).score)
    except JudgeFailure as exc:
        return _failed("source_relevance", str(exc))
    value = 0.8 * max(scores) + 0.2 * (sum(scores) / len(scores))
    return _score("source_relevance", value, {"chunk_scores": scores})


# --------------------------------------------------------------------------
# Hybrid metrics (judge + embeddings)
# --------------------------------------------------------------------------


def _extract_points(text: str, judge_llm) -> list[str]:
    """Judge-extracted key points, one retry; raises JudgeFailure."""
    if not text.strip():
        return []
    prompt = _fill("extract_key_points", text=text)
    reminder = '\n\nReminder: output only lines starting with "- ".'
    raw = ""
    for attempt, p in enumerate((prompt, prompt + reminder)):
        try:
            raw = judge_llm.generate(GenerationRequest(prompt=p)).text
        except Exception as exc:
            raise JudgeFailure(f"point extraction call failed: {exc}") from exc
        points = [line[2:].strip() for line in raw.splitlines() if line.startswith("- ")]
        points = [p for p in points if p]
        if points:
            return points
        if attempt == 0:
            logger.warning("point extraction returned no '- ' lines; retrying")
    raise JudgeFailure(f"point extraction produced no points; last output started: {raw[:80]!r}")


def _unit_rows(texts: list[str], embedder) -> np.ndarray:
    rows = np.asarray(embedder.embed(texts), dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    norms[norms < 1e-12] = 1.0
    return rows / norms[:, np.newaxis]


def _match_counts(
    points_a: list[str], points_b: list[str], embedder, match_threshold: float
) -> tuple[int, int, np.ndarray]:
    """How many points of each list have a cosine match in the other list."""
    rows = _unit_rows(points_a + points_b, embedder)
    a, b = rows[: len(points_a)], rows[len(points_a) :]
    sims = a @ b.T
    matched_a = int((sims.max(axis=1) >= match_threshold).sum()) if sims.size else 0
    matched_b = int((sims.max(axis=0) >= match_threshold).sum()) if sims.size else 0
    return matched_a, matched_b, sims


def semantic_f1(
    response: str,
    ground_truth: str,
    judge_llm,
    embedder,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> MetricScore:
    """Harmonic mean of point-level precision and recall under embedding matching."""
    try:
        points_gt = _extract_points(ground_truth, judge_llm)
        points_r = _extract_points(response, judge_llm)
    except JudgeFailure as exc:
        return _failed("semantic_f1", str(exc))
    evidence: dict = {"ground_truth_points": points_gt, "response_points": points_r}
    if not points_gt and not points_r:
        return _score("semantic_f1", 1.0, evidence)
    if not points_gt or not points_r:
        return _score("semantic_f1", 0.0, evidence)
    try:
        matched_gt, matched_r, _ = _match_counts(points_gt, points_r, embedder, match_threshold)
    except Exception as exc:
        return _failed("semantic_f1", f"embedding failed: {exc}")
    precision = matched_r / len(points_r)
    recall = matched_gt / len(points_gt)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    evidence.update({"precision": precision, "recall": recall})
    return _score("semantic_f1", f1, evidence)


def answer_relevance(
    question: str, response: str, judge_llm, embedder, blend: float = DEFAULT_ANSWER_BLEND
) -> MetricScore:
    """Blend of normalized embedding cosine and a judge relevance score.

    `blend` is the cosine side's weight; the judge gets the rest.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must be in [0, 1]")
    try:
        prompt = _fill("judge_answer_relevance", question=question, response=response)
        verdict = _call_judge(prompt, judge_llm)
    except JudgeFailure as exc:
        return _failed("answer_relevance", str(exc))
    try:
        rows = _unit_rows([question, response], embedder)
    except Exception as exc:
        return _failed("answer_relevance", f"embedding failed: {exc}")
    cosine = float(rows[0] @ rows[1])
    normalized = (cosine + 1.0) / 2.0
    value = blend * normalized + (1.0 - blend) * verdict.score
    return _score(
        "answer_relevance",
        value,
        {"cosine": cosine, "judge_score": verdict.score, "rationale": verdict.rationale},
    )


def _coverage_fraction(
    points: list[str], text: str, judge_llm, embedder, match_threshold: float
) -> tuple[float, list[dict]]:
    """Fraction of points covered by text: judge claim + embedding verification.

    A point counts as covered only when the judge answers yes AND the point's
    embedding matches some sentence of the covering text at match_threshold.
    """
    numbered = "\n".join(f"{i}. {p}" for i, p in enumerate(points, start=1))
    prompt = _fill("point_coverage", points=numbered, text=text)
    reminder = '\n\nReminder: one line per point, exactly "<number>: yes" or "<number>: no".'
    claims: dict[int, bool] = {}
    raw = ""
    for attempt, p in enumerate((prompt, prompt + reminder)):
        try:
            raw = judge_llm.generate(GenerationRequest(prompt=p)).text
        except Exception as exc:
            raise JudgeFailure(f"coverage call failed: {exc}") from exc
        claims = {}
        for m in re.finditer(r"^\s*(\d+)\s*:\s*(yes|no)\s*$", raw, re.MULTILINE | re.IGNORECASE):
            claims[int(m.group(1))] = m.group(2).lower() == "yes"
        if claims:
            break
        if attempt == 0:
            logger.warning("coverage reply had no yes/no lines; retrying")
    if not claims:
        raise JudgeFailure(f"coverage reply unparseable; last output started: {raw[:80]!r}")

    sentences = [s for s in split_sentences(text) if s.strip()] or [text]
    rows = _unit_rows(points + sentences, embedder)
    point_rows, sent_rows = rows[: len(points)], rows[len(points) :]
    sims = point_rows @ sent_rows.T
    detail = []
    covered = 0
    for i, point in enumerate(points, start=1):
        claimed = claims.get(i, False)
        verified = bool(sims[i - 1].max() >= match_threshold)
        detail.append({"point": point, "claimed": claimed, "verified": verified})
        if claimed and verified:
            covered += 1
    return covered / len(points), detail


def completeness_gain(
    response: str,
    ground_truth: str,
    full_context: str,
    judge_llm,
    embedder,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> MetricScore:
    """0.5 means the response covers the context's points exactly as well as
    the ground truth; above/below means more/less coverage, scaled by half the
    coverage difference."""
    if not full_context.strip():
        return _score("completeness_gain", 0.5, {"points": [], "note": "empty context"})
    try:
        points = _extract_points(full_context, judge_llm)
        if not points:
            return _score("completeness_gain", 0.5, {"points": [], "note": "no points extracted"})
        coverage_gt, detail_gt = _coverage_fraction(points, ground_truth, judge_llm, embedder, match_threshold)
        coverage_r, detail_r = _coverage_fraction(points, response, judge_llm, embedder, match_threshold)
    except JudgeFailure as exc:
        return _failed("completeness_gain", str(exc))
    except Exception as exc:
        return _failed("completeness_gain", f"embedding failed: {exc}")
    value = min(1.0, max(0.0, 0.5 + (coverage_r - coverage_gt) / 2.0))
    return _score(
        "completeness_gain",
        value,
        {
            "points": points,
            "coverage_ground_truth": coverage_gt,
            "coverage_response": coverage_r,
            "response_detail": detail_r,
        },
    )


# --------------------------------------------------------------------------
# Numerical accuracy (separate assessment, never in the weighted aggregate)
# --------------------------------------------------------------------------

_NUMBER_RE = re.compile(r"[-+]?\d{1,3}(?:,\d{3})+(?:\.\d+)?|[-+]?\d*\.\d+|[-+]?\d+")


def extract_numbers(text: str) -> list[float]:
    """Numeric literals with thousands separators and percent signs normalized."""
    return [float(m.group(0).replace(",", "")) for m in _NUMBER_RE.finditer(text)]


def numerical_accuracy(response: str, ground_truth: str) -> float | None:
    """Fraction of ground-truth numbers the response reproduces within 0.1%.

    Returns None when the ground truth contains no numbers; the metric is
    tracked separately and never enters the weighted aggregate.
    """
    gt_numbers = extract_numbers(ground_truth)
    if not gt_numbers:
        return None
    response_numbers = extract_numbers(response)
    matched = sum(
        1
        for g in gt_numbers
        if any(math.isclose(g, r, rel_tol=1e-3, abs_tol=1e-9) for r in response_numbers)
    )
    return matched / len(gt_numbers)


# --------------------------------------------------------------------------
# One-record orchestration
# --------------------------------------------------------------------------


def compute_metrics(
    question: str,
    response: str,
    ground_truth: str,
    context_chunks: list[str],
    judge_llm,
    embedder,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
    answer_blend: float = DEFAULT_ANSWER_BLEND,
) -> dict[str, MetricScore]:
    """Compute all nine metrics for one answered question."""
    context = "\n\n".join(context_chunks)
    scores = {
        "key_terms_precision": key_terms_precision(response, ground_truth, context),
        "token_recall": token_recall(response, ground_truth),
        "truthfulness": truthfulness(question, response, ground_truth, judge_llm),
        "completeness": completeness(question, response, ground_truth, judge_llm),
        "context_faithfulness": context_faithfulness(question, response, context_chunks, judge_llm),
        "semantic_f1": semantic_f1(response, ground_truth, judge_llm, embedder, match_threshold),
        "answer_relevance": answer_relevance(question, response, judge_llm, embedder, answer_blend),
        "completeness_gain": completeness_gain(
            response, ground_truth, context, judge_llm, embedder, match_threshold
        ),
    }
    if context_chunks:
        scores["source_relevance"] = source_relevance(question, ground_truth, context_chunks, judge_llm)
    else:
        scores["source_relevance"] = _score(
            "source_relevance", 0.0, {"chunk_scores": [], "note": "no chunks retrieved"}
        )
    return scores
