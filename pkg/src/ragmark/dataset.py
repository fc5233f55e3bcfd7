"""QA dataset loading, structural validation, and LLM-assisted drafting.

The dataset is a JSON-lines file, one QA pair per line. Validation is
structural only: non-empty question and ground truth, unique qa_id, tags from
the known vocabulary, and a numeric flag consistent with the ground-truth
text. Curation judgment stays with humans; LLM-drafted pairs carry
draft=true and are skipped by loading until a reviewer clears the flag (or
the caller passes allow_drafts).
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .assets import load_prompt
from .corpus import Document
from .metrics import extract_numbers
from .modelgw import GenerationRequest

logger = logging.getLogger(__name__)

VALID_TAGS = ("factual", "numerical", "multi_document", "comparative")
_DRAFT_TEXT_BUDGET = 4000


@dataclass(frozen=True)
class QAPair:
    qa_id: str
    question: str
    ground_truth: str
    source_doc_ids: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    is_numeric: bool = False
    draft: bool = False

    def to_payload(self) -> dict:
        return {
            "qa_id": self.qa_id,
            "question": self.question,
            "ground_truth": self.ground_truth,
            "source_doc_ids": list(self.source_doc_ids),
            "tags": list(self.tags),
            "is_numeric": self.is_numeric,
            "draft": self.draft,
        }


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    pairs: list[QAPair] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.errors


_KNOWN_FIELDS = {"qa_id", "question", "ground_truth", "source_doc_ids", "tags", "is_numeric", "draft"}


def _parse_pair(row: dict, lineno: int, report: ValidationReport) -> QAPair | None:
    ok = True

    def err(message: str) -> None:
        nonlocal ok
        ok = False
        report.errors.append(f"line {lineno}: {message}")

    qa_id = row.get("qa_id")
    if not isinstance(qa_id, str) or not qa_id.strip():
        err("qa_id missing or empty")
        qa_id = f"<line {lineno}>"
    for key in ("question", "ground_truth"):
        value = row.get(key)
        if not isinstance(value, str) or not value.strip():
            err(f"{key} missing or empty")
    tags = row.get("tags", [])
    if not isinstance(tags, list) or any(not isinstance(t, str) for t in tags):
        err("tags must be a list of strings")
        tags = []
    else:
        for tag in tags:
            if tag not in VALID_TAGS:
                err(f"unknown tag {tag!r} (expected one of {', '.join(VALID_TAGS)})")
    source_doc_ids = row.get("source_doc_ids", [])
    if not isinstance(source_doc_ids, list) or any(not isinstance(d, str) for d in source_doc_ids):
        err("source_doc_ids must be a list of strings")
        source_doc_ids = []
    is_numeric = row.get("is_numeric", False)
    if not isinstance(is_numeric, bool):
        err("is_numeric must be a boolean")
        is_numeric = False
    draft = row.get("draft", False)
    if not isinstance(draft, bool):
        err("draft must be a boolean")
        draft = False
    if is_numeric and isinstance(row.get("ground_truth"), str) and not extract_numbers(row["ground_truth"]):
        err("is_numeric is true but ground_truth contains no parseable number")
    unknown = set(row) - _KNOWN_FIELDS
    if unknown:
        report.warnings.append(f"line {lineno}: unknown fields ignored: {', '.join(sorted(unknown))}")

    if not ok:
        return None
    return QAPair(
        qa_id=qa_id,
        question=row["question"].strip(),
        ground_truth=row["ground_truth"].strip(),
        source_doc_ids=tuple(source_doc_ids),
        tags=tuple(tags),
        is_numeric=is_numeric,
        draft=draft,
    )


def validate_dataset(path: str | Path) -> ValidationReport:
    """Structural validation with line-numbered errors; accepted iff none."""
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"dataset file not found: {file_path}")
    report = ValidationReport()
    first_seen: dict[str, int] = {}
    for lineno, line in enumerate(file_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            report.errors.append(f"line {lineno}: invalid JSON: {exc}")
            continue
        if not isinstance(row, dict):
            report.errors.append(f"line {lineno}: expected a JSON object")
            continue
        pair = _parse_pair(row, lineno, report)
        if pair is None:
            continue
        if pair.qa_id in first_seen:
            report.errors.append(
                f"line {lineno}: duplicate qa_id {pair.qa_id!r} (first seen line {first_seen[pair.qa_id]})"
            )
            continue
        first_seen[pair.qa_id] = lineno
        report.pairs.append(pair)
    if not report.errors and not report.pairs:
        report.errors.append("dataset contains no QA pairs")
    return report


def load_dataset(path: str | Path, allow_drafts: bool = False) -> list[QAPair]:
    """Validated pairs ready for evaluation; drafts are skipped unless allowed."""
    report = validate_dataset(path)
    if not report.accepted:
        summary = "; ".join(report.errors[:5])
        raise ValueError(f"dataset rejected with {len(report.errors)} error(s): {summary}")
    pairs = report.pairs
    if not allow_drafts:
        drafts = [p for p in pairs if p.draft]
        if drafts:
            logger.warning("skipping %d draft pair(s); pass allow_drafts to include them", len(drafts))
        pairs = [p for p in pairs if not p.draft]
    if not pairs:
        raise ValueError("dataset has no usable QA pairs (all drafts?)")
    return pairs


def save_pairs(pairs: list[QAPair], path: str | Path) -> None:
    lines = [json.dumps(p.to_payload(), sort_keys=True, separators=(",", ":")) for p in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# LLM drafting
# --------------------------------------------------------------------------


def _parse_json_array(text: str) -> list | None:
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("["), text.rfind("]")
        if start == -1 or end <= start:
            return None
        try:
            value = json.loads(text[start : end + 1])
        except json.JSONDecodeError:
            return None
    return value if isinstance(value, list) else None


def _draft_from_text(
    llm, text: str, count: int, qa_prefix: str, doc_ids: tuple[str, ...], extra_tags: tuple[str, ...]
) -> list[QAPair]:
    prompt = load_prompt("draft_qa").replace("{count}", str(count)).replace(
        "{text}", text[:_DRAFT_TEXT_BUDGET]
    )
    reply = llm.generate(GenerationRequest(prompt=prompt)).text
    rows = _parse_json_array(reply)
    if rows is None:
        logger.warning("draft output for %s was not a JSON array; skipped", qa_prefix)
        return []
    pairs = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            logger.warning("draft element %d for %s is not an object; skipped", i, qa_prefix)
            continue
        question, answer = row.get("question"), row.get("answer")
        if not isinstance(question, str) or not question.strip():
            logger.warning("draft element %d for %s lacks a question; skipped", i, qa_prefix)
            continue
        if not isinstance(answer, str) or not answer.strip():
            logger.warning("draft element %d for %s lacks an answer; skipped", i, qa_prefix)
            continue
        numeric = bool(extract_numbers(answer))
        tags = tuple(dict.fromkeys(("numerical" if numeric else "factual",) + extra_tags))
        pairs.append(
            QAPair(
                qa_id=f"{qa_prefix}-{i}",
                question=question.strip(),
                ground_truth=answer.strip(),
                source_doc_ids=doc_ids,
                tags=tags,
                is_numeric=numeric,
                draft=True,
            )
        )
    return pairs


def draft_qa_candidates(
    documents: list[Document],
    llm,
    per_doc_count: int = 3,
    include_pairs: bool = False,
) -> list[QAPair]:
    """LLM-drafted QA candidates, flagged draft=true pending human review.

    With include_pairs, every document pair also gets a prompt so candidates
    can span two sources; those drafts carry the multi_document tag.
    """
    if per_doc_count < 1:
        raise ValueError("per_doc_count must be >= 1")
    if not documents:
        raise ValueError("no documents to draft from")
    drafts: list[QAPair] = []
    for doc in documents:
        drafts.extend(
            _draft_from_text(llm, doc.text, per_doc_count, f"draft-{doc.doc_id}", (doc.doc_id,), ())
        )
    if include_pairs:
        for a, b in itertools.combinations(documents, 2):
            combined = f"{a.text}\n\n---\n\n{b.text}"
            drafts.extend(
                _draft_from_text(
                    llm,
                    combined,
                    per_doc_count,
                    f"draft-{a.doc_id}+{b.doc_id}",
                    (a.doc_id, b.doc_id),
                    ("multi_document",),
                )
            )
    return drafts
