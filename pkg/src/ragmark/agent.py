"""ReAct agent loop over a single document_search tool.

Two prompt profiles drive the same loop. ``react_base`` gives plain
Thought / Action / Observation instructions; ``react_custom`` additionally
requires a structured self-evaluation thought (current status, strategy, a
confidence score in [0, 1]) and search guidance for refining queries. The
loop alternates generate, parse, tool dispatch, and observation until the
model emits a Final Answer or the iteration cap is hit.

Replies that fit neither the action grammar nor the final-answer grammar get
one corrective re-prompt per run; a second malformed reply ends the trace
with the raw text as the answer and a parse-failure flag.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable

from .assets import load_prompt
from .modelgw import GenerationRequest, LLMPort
from .retrieval import RetrievalResult

logger = logging.getLogger(__name__)

PROFILE_NAMES = ("react_base", "react_custom")
TOOL_NAME = "document_search"
DEFAULT_TOOL_DESCRIPTIONS = (
    "document_search(query): search the document corpus and return the most relevant passages.",
)
DEFAULT_MAX_ITERATIONS = 10
DEFAULT_OBSERVATION_CHAR_BUDGET = 2000

_FINAL_RE = re.compile(r"^[ \t]*Final Answer:\s*(.*)", re.MULTILINE | re.DOTALL)
_ACTION_RE = re.compile(r"^[ \t]*Action:[ \t]*(.+?)[ \t]*$", re.MULTILINE)
_INPUT_RE = re.compile(r"^[ \t]*Action Input:[ \t]*(.+?)[ \t]*$", re.MULTILINE)
_THOUGHT_RE = re.compile(
    r"^[ \t]*Thought:\s*(.*?)(?=^[ \t]*(?:Action|Action Input|Final Answer):|\Z)",
    re.MULTILINE | re.DOTALL,
)
_CONFIDENCE_RE = re.compile(r"Confidence:\s*([-+]?\d+(?:\.\d+)?)\s*(%)?")


@dataclass(frozen=True)
class AgentProfile:
    name: str
    system_prompt_template: str
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    confidence_required: bool = False

    def __post_init__(self) -> None:
        if self.name not in PROFILE_NAMES:
            raise ValueError(f"unknown profile: {self.name!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.name == "react_custom" and not self.confidence_required:
            raise ValueError("react_custom requires confidence scoring")


@dataclass(frozen=True)
class AgentStep:
    thought: str
    action: tuple[str, str] | None = None  # (tool_name, tool_input)
    observation: str | None = None
    confidence: float | None = None


@dataclass(frozen=True)
class AgentTrace:
    question: str
    profile_name: str
    steps: tuple[AgentStep, ...]
    final_answer: str
    retrievals: tuple[RetrievalResult, ...]
    iterations_used: int
    terminated_by: str  # final_answer or iteration_cap
    parse_failure: bool = False


@dataclass(frozen=True)
class ParsedTurn:
    kind: str  # action, final, or invalid
    thought: str = ""
    tool_name: str | None = None
    tool_input: str | None = None
    final_answer: str | None = None
    confidence: float | None = None


def get_profile(
    name: str,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    overrides_dir: str | None = None,
) -> AgentProfile:
    """Load a profile with its packaged (or overridden) prompt template."""
    if name not in PROFILE_NAMES:
        raise ValueError(f"unknown profile: {name!r} (expected one of {PROFILE_NAMES})")
    return AgentProfile(
        name=name,
        system_prompt_template=load_prompt(name, overrides_dir=overrides_dir),
        max_iterations=max_iterations,
        confidence_required=(name == "react_custom"),
    )


def render_system_prompt(profile: AgentProfile, tool_descriptions: list[str]) -> str:
    """Fill the {tools} placeholder; {question} and {transcript} stay per-turn."""
    if not tool_descriptions:
        raise ValueError("at least one tool is required")
    return profile.system_prompt_template.replace("{tools}", "\n".join(tool_descriptions))


def render_turn_prompt(system_prompt: str, question: str, transcript: str) -> str:
    return system_prompt.replace("{question}", question).replace("{transcript}", transcript)


def _parse_confidence(text: str) -> float | None:
    m = _CONFIDENCE_RE.search(text)
    if m is None:
        return None
    value = float(m.group(1))
    if m.group(2):
        value /= 100.0
    if not 0.0 <= value <= 1.0:
        logger.warning("confidence %s out of range, clamped", m.group(1))
        value = min(1.0, max(0.0, value))
    return value


def parse_step(model_output: str) -> ParsedTurn:
    """Parse one model reply against the ReAct grammar.

    Returns kind="final" when a Final Answer label carries text, kind="action"
    when both Action and Action Input carry text, and kind="invalid" otherwise.
    """
    thought_match = _THOUGHT_RE.search(model_output)
    thought = thought_match.group(1).strip() if thought_match else ""
    confidence = _parse_confidence(model_output)

    final_match = _FINAL_RE.search(model_output)
    if final_match and final_match.group(1).strip():
        return ParsedTurn(
            kind="final",
            thought=thought,
            final_answer=final_match.group(1).strip(),
            confidence=confidence,
        )

    action_match = _ACTION_RE.search(model_output)
    input_match = _INPUT_RE.search(model_output)
    if action_match and input_match:
        return ParsedTurn(
            kind="action",
            thought=thought,
            tool_name=action_match.group(1).strip(),
            tool_input=input_match.group(1).strip(),
            confidence=confidence,
        )
    return ParsedTurn(kind="invalid", thought=thought, confidence=confidence)


def format_observation(result: RetrievalResult, char_budget: int = DEFAULT_OBSERVATION_CHAR_BUDGET) -> str:
    """Render retrieved chunks as numbered passages tagged with their doc id."""
    if not result.chunks:
        return "No passages found."
    lines = []
    for i, chunk in enumerate(result.chunks, start=1):
        doc_id = chunk.chunk_id.rsplit("::", 1)[0]
        lines.append(f"[{i}] ({doc_id}) {' '.join(chunk.text.split())}")
    body = "\n".join(lines)
    if len(body) > char_budget:
        body = body[:char_budget] + " [truncated]"
    return body


_CORRECTION = (
    "System: your last reply was not in the required format. Respond in the required "
    "format: either an Action line with an Action Input line, or a Final Answer line."
)


def run_agent(
    question: str,
    profile: AgentProfile,
    retriever: Callable[[str], RetrievalResult],
    llm: LLMPort,
    observation_char_budget: int = DEFAULT_OBSERVATION_CHAR_BUDGET,
) -> AgentTrace:
    """Run the ReAct loop for one question and return the full trace."""
    if not question.strip():
        raise ValueError("empty question")
    system_prompt = render_system_prompt(profile, list(DEFAULT_TOOL_DESCRIPTIONS))

    transcript_parts: list[str] = []
    steps: list[AgentStep] = []
    retrievals: list[RetrievalResult] = []
    correction_used = False
    iterations_used = 0

    while iterations_used < profile.max_iterations:
        iterations_used += 1
        prompt = render_turn_prompt(system_prompt, question, "\n".join(transcript_parts))
        reply = llm.generate(GenerationRequest(prompt=prompt, stop_sequences=("\nObservation:",)))
        parsed = parse_step(reply.text)

        if parsed.kind == "invalid":
            if correction_used:
                logger.warning("agent reply unparseable twice; terminating with raw text")
                return AgentTrace(
                    question=question,
                    profile_name=profile.name,
                    steps=tuple(steps),
                    final_answer=reply.text.strip() or "(no parseable answer)",
                    retrievals=tuple(retrievals),
                    iterations_used=iterations_used,
                    terminated_by="final_answer",
                    parse_failure=True,
                )
            correction_used = True
            transcript_parts.append(reply.text.strip())
            transcript_parts.append(_CORRECTION)
            prompt = render_turn_prompt(system_prompt, question, "\n".join(transcript_parts))
            reply = llm.generate(GenerationRequest(prompt=prompt, stop_sequences=("\nObservation:",)))
            parsed = parse_step(reply.text)
            if parsed.kind == "invalid":
                logger.warning("agent reply unparseable twice; terminating with raw text")
                return AgentTrace(
                    question=question,
                    profile_name=profile.name,
                    steps=tuple(steps),
                    final_answer=reply.text.strip() or "(no parseable answer)",
                    retrievals=tuple(retrievals),
                    iterations_used=iterations_used,
                    terminated_by="final_answer",
                    parse_failure=True,
                )

        confidence = parsed.confidence if profile.confidence_required else None

        if parsed.kind == "final":
            steps.append(AgentStep(thought=parsed.thought, confidence=confidence))
            transcript_parts.append(reply.text.strip())
            return AgentTrace(
                question=question,
                profile_name=profile.name,
                steps=tuple(steps),
                final_answer=parsed.final_answer or "",
                retrievals=tuple(retrievals),
                iterations_used=iterations_used,
                terminated_by="final_answer",
            )

        # Action turn. Unknown tools produce an error observation and no
        # retrieval; the step records no action so that steps-with-actions
        # stays equal to retrievals captured.
        if parsed.tool_name != TOOL_NAME:
            observation = f"Error: unknown tool '{parsed.tool_name}'. Available tools: {TOOL_NAME}."
            steps.append(AgentStep(thought=parsed.thought, observation=observation, confidence=confidence))
        else:
            result = retriever(parsed.tool_input or "")
            retrievals.append(result)
            observation = format_observation(result, observation_char_budget)
            steps.append(
                AgentStep(
                    thought=parsed.thought,
                    action=(parsed.tool_name, parsed.tool_input or ""),
                    observation=observation,
                    confidence=confidence,
                )
            )
        transcript_parts.append(reply.text.strip())
        transcript_parts.append(f"Observation: {observation}")

    last_thought = next((s.thought for s in reversed(steps) if s.thought), "")
    final_answer = "Based on partial findings: " + (last_thought or "no conclusive findings.")
    return AgentTrace(
        question=question,
        profile_name=profile.name,
        steps=tuple(steps),
        final_answer=final_answer,
        retrievals=tuple(retrievals),
        iterations_used=iterations_used,
        terminated_by="iteration_cap",
    )
