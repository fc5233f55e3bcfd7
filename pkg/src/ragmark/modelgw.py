"""Gateways to external model servers, plus deterministic offline mocks.

Four roles sit behind small ports: embedding, cross-encoder reranking, text
generation, and judging (a judge is just a generation port with a different
endpoint). The HTTP adapters speak a minimal JSON protocol against a local
model server:

    POST {base_url}/api/generate    {"model", "prompt", "temperature", "stop"} -> {"text"}
    POST {base_url}/api/embeddings  {"model", "input"}                         -> {"vectors"}
    POST {base_url}/api/rerank      {"model", "query", "passages"}             -> {"scores"}

If no rerank endpoint exists, ``LLMRerankAdapter`` scores passages through a
generation port instead. The mock backends are pure functions of their inputs
and a seed, so a full evaluation run against them is byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import socket
import threading
import time
import urllib.parse
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import requests

from .corpus import content_tokens, split_sentences

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.1
DEFAULT_RERANK_BATCH_SIZE = 32


class GatewayError(RuntimeError):
    """Transport or protocol failure talking to a model server."""


@dataclass(frozen=True)
class ModelEndpointConfig:
    base_url: str
    model_name: str
    temperature: float = DEFAULT_TEMPERATURE
    timeout: float = 60.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    temperature: float | None = None  # None -> endpoint default
    stop_sequences: tuple[str, ...] = ()


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


class EmbeddingPort(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


@dataclass(frozen=True)
class PortSet:
    """The four model roles an evaluation run needs."""

    embedder: "EmbeddingPort"
    reranker: "RerankPort"
    generator: "LLMPort"
    judge: "LLMPort"

    def preflight(self) -> None:
        for port in (self.embedder, self.reranker, self.generator, self.judge):
            check = getattr(port, "preflight", None)
            if check is not None:
                check()


class RerankPort(Protocol):
    def rerank_scores(
        self, query: str, passages: Sequence[str], batch_size: int = DEFAULT_RERANK_BATCH_SIZE
    ) -> list[float]: ...


class LLMPort(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


def apply_stop_sequences(text: str, stops: Sequence[str]) -> str:
    """Truncate text before the earliest stop sequence, if any occurs."""
    cut = len(text)
    for stop in stops:
        if stop:
            idx = text.find(stop)
            if idx != -1:
                cut = min(cut, idx)
    return text[:cut]


_SCORE_RE = re.compile(r"^\s*Score:\s*([-+]?\d*\.?\d+)\s*%?\s*$", re.IGNORECASE | re.MULTILINE)


def parse_score_line(text: str) -> float | None:
    """Extract the first "Score: <number>" line, clamped to [0, 1].

    Percent values ("Score: 80%") are divided by 100. Returns None when no
    score line is present.
    """
    m = _SCORE_RE.search(text)
    if m is None:
        return None
    value = float(m.group(1))
    if "%" in m.group(0):
        value /= 100.0
    return min(1.0, max(0.0, value))


# --------------------------------------------------------------------------
# HTTP adapters
# --------------------------------------------------------------------------


def _check_embeddings(vectors: list, expected: int) -> list[list[float]]:
    if not isinstance(vectors, list) or len(vectors) != expected:
        raise GatewayError(f"embedding server returned {len(vectors)} vectors for {expected} inputs")
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise GatewayError(f"inconsistent embedding dimensions in one batch: {sorted(dims)}")
    return [[float(x) for x in v] for v in vectors]


class _HttpClient:
    def __init__(self, config: ModelEndpointConfig, limiter: threading.Semaphore | None = None):
        self.config = config
        self._limiter = limiter
        self._session = requests.Session()

    def preflight(self) -> None:
        """Cheap reachability probe: open a TCP connection to the endpoint host."""
        parsed = urllib.parse.urlparse(self.config.base_url)
        host = parsed.hostname or ""
        port = parsed.port or (443 if parsed.scheme == "https" else 80)
        try:
            with socket.create_connection((host, port), timeout=min(5.0, self.config.timeout)):
                pass
        except OSError as exc:
            raise GatewayError(f"endpoint unreachable: {self.config.base_url} ({exc})") from exc

    def _post(self, path: str, payload: dict) -> dict:
        url = self.config.base_url.rstrip("/") + path
        attempts = self.config.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(0.2 * attempt)
            try:
                if self._limiter is not None:
                    with self._limiter:
                        resp = self._session.post(url, json=payload, timeout=self.config.timeout)
                else:
                    resp = self._session.post(url, json=payload, timeout=self.config.timeout)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                logger.warning("model call failed (attempt %d/%d): %s", attempt + 1, attempts, exc)
        raise GatewayError(f"model call to {url} failed after {attempts} attempts: {last_error}")


class HttpEmbeddingClient(_HttpClient):
    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        _validate_texts(texts)
        data = self._post("/api/embeddings", {"model": self.config.model_name, "input": list(texts)})
        return _check_embeddings(data.get("vectors", []), len(texts))


class HttpRerankClient(_HttpClient):
    def rerank_scores(
        self, query: str, passages: Sequence[str], batch_size: int = DEFAULT_RERANK_BATCH_SIZE
    ) -> list[float]:
        _validate_texts(passages, what="passages")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        scores: list[float] = []
        for i in range(0, len(passages), batch_size):
            batch = list(passages[i : i + batch_size])
            data = self._post(
                "/api/rerank",
                {"model": self.config.model_name, "query": query, "passages": batch},
            )
            batch_scores = data.get("scores", [])
            if len(batch_scores) != len(batch):
                raise GatewayError(
                    f"rerank server returned {len(batch_scores)} scores for {len(batch)} passages"
                )
            scores.extend(float(s) for s in batch_scores)
        return scores


class HttpGenerationClient(_HttpClient):
    def generate(self, request: GenerationRequest) -> GenerationResponse:
        if not request.prompt:
            raise ValueError("prompt must be non-empty")
        temperature = request.temperature if request.temperature is not None else self.config.temperature
        data = self._post(
            "/api/generate",
            {
                "model": self.config.model_name,
                "prompt": request.prompt,
                "temperature": temperature,
                "stop": list(request.stop_sequences),
            },
        )
        text = apply_stop_sequences(str(data.get("text", "")), request.stop_sequences)
        usage = data.get("usage", {})
        return GenerationResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


_RERANK_VIA_LLM_PROMPT = """Rate how relevant the passage is to the query, from 0 (unrelated) to 1 (directly answers it).

Question:
{query}

Passage:
{passage}

Reply with one line of the form "Score: <number between 0 and 1>".
"""


class LLMRerankAdapter:
    """Fallback reranker that scores (query, passage) pairs through an LLM port.

    Used when no cross-encoder endpoint is available. Unparseable judge output
    scores 0.0 rather than failing the retrieval.
    """

    def __init__(self, llm: LLMPort):
        self._llm = llm

    def preflight(self) -> None:
        preflight = getattr(self._llm, "preflight", None)
        if preflight is not None:
            preflight()

    def rerank_scores(
        self, query: str, passages: Sequence[str], batch_size: int = DEFAULT_RERANK_BATCH_SIZE
    ) -> list[float]:
        _validate_texts(passages, what="passages")
        scores = []
        for passage in passages:
            prompt = _RERANK_VIA_LLM_PROMPT.replace("{query}", query).replace("{passage}", passage)
            reply = self._llm.generate(GenerationRequest(prompt=prompt))
            score = parse_score_line(reply.text)
            scores.append(score if score is not None else 0.0)
        return scores


def _validate_texts(texts: Sequence[str], what: str = "texts") -> None:
    if not texts:
        raise ValueError(f"{what} must be non-empty")
    for i, t in enumerate(texts):
        if not t:
            raise ValueError(f"{what}[{i}] is empty")


# --------------------------------------------------------------------------
# Deterministic mock backends
# --------------------------------------------------------------------------


def _stable_hash(seed: int, value: str) -> int:
    digest = hashlib.md5(f"{seed}:{value}".encode("utf-8")).hexdigest()
    return int(digest[:12], 16)


class MockEmbedder:
    """Hash-bucketed bag-of-words embeddings.

    Each lowercased word token increments one of ``dim`` buckets chosen by a
    salted stable hash, so cosine similarity between two texts is a direct,
    hand-computable function of their token overlap. Vectors are returned
    unnormalized; callers normalize where they need unit vectors.
    """

    def __init__(self, dim: int = 16, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed

    def bucket_index(self, token: str) -> int:
        return _stable_hash(self.seed, token.lower()) % self.dim

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        _validate_texts(texts)
        vectors = []
        for text in texts:
            vec = [0.0] * self.dim
            for token in content_tokens(text):
                vec[self.bucket_index(token)] += 1.0
            vectors.append(vec)
        return vectors

    def preflight(self) -> None:
        pass


class MockReranker:
    """Scores each passage as the fraction of the query's unique tokens it contains."""

    def rerank_scores(
        self, query: str, passages: Sequence[str], batch_size: int = DEFAULT_RERANK_BATCH_SIZE
    ) -> list[float]:
        _validate_texts(passages, what="passages")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        query_tokens = set(content_tokens(query))
        scores = []
        for passage in passages:
            if not query_tokens:
                scores.append(0.0)
                continue
            passage_tokens = set(content_tokens(passage))
            scores.append(len(query_tokens & passage_tokens) / len(query_tokens))
        return scores

    def preflight(self) -> None:
        pass


class ScriptedLLM:
    """Replays a fixed list of replies: the Nth call returns the Nth entry.

    With ``repeat_last`` the final entry answers every later call, which is
    handy for iteration-cap tests. All prompts are kept in ``calls``.
    """

    def __init__(self, replies: Sequence[str], repeat_last: bool = False):
        self._replies = list(replies)
        self._repeat_last = repeat_last
        self.calls: list[str] = []

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        if not request.prompt:
            raise ValueError("prompt must be non-empty")
        self.calls.append(request.prompt)
        idx = len(self.calls) - 1
        if idx >= len(self._replies):
            if not self._repeat_last or not self._replies:
                raise GatewayError(f"scripted LLM exhausted after {len(self._replies)} replies")
            idx = len(self._replies) - 1
        text = apply_stop_sequences(self._replies[idx], request.stop_sequences)
        return GenerationResponse(text=text)

    def preflight(self) -> None:
        pass


_SECTION_HEADER_RE = re.compile(r"^([A-Z][A-Za-z ]{0,40}):\s*$")
_OBSERVATION_PASSAGE_RE = re.compile(r"\[1\] \(([^)]*)\) (.*?)(?=\n\[\d+\] \(|\Z)", re.DOTALL)
_DRAFT_COUNT_RE = re.compile(r"write (\d+) question/answer pairs")
_INSTRUCTION_PREFIXES = ("Reply with", "Answer with", "List the key points", "Respond with")


def _labeled_sections(prompt: str) -> list[tuple[str, str]]:
    """Split a prompt into (header, body) pairs on lines like "Question:".

    Parsing stops at the closing format instruction ("Reply with...", "Answer
    with...") so instruction text never leaks into the last section's body.
    """
    sections: list[tuple[str, list[str]]] = []
    for line in prompt.splitlines():
        if line.startswith(_INSTRUCTION_PREFIXES):
            break
        m = _SECTION_HEADER_RE.match(line)
        if m:
            sections.append((m.group(1), []))
        elif sections:
            sections[-1][1].append(line)
    return [(name, "\n".join(body).strip()) for name, body in sections]


class MockLLM:
    """Rule-based offline generator for end-to-end runs.

    The reply depends only on the prompt text and the seed. Dispatch rules, in
    order:

    1. "ECHO:" directive -> the remainder of that line.
    2. ReAct turn (prompt contains "Action Input:"): first turn emits a
       document_search action for the question; once an Observation is present,
       answers with the text of its first passage.
    3. Coverage check (asks for "<number>: yes"): a point is covered when at
       least 60% of its unique word tokens occur in the Text section.
    4. Key-point extraction ("List the key points"): one "- " line per sentence
       of the Text section, capped at 8.
    5. Scoring rubric (asks for a "Score:" line): token overlap coefficient
       of the last two labeled sections, |A and B| / min(|A|, |B|), rounded to
       4 decimals, so a reply that contains the reference scores 1.0;
       hash-derived when the prompt has fewer than two sections.
    6. QA drafting ("JSON array"): one synthetic pair per sentence of the
       source material, up to the requested count.
    Anything else gets a short hash-stamped acknowledgement.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.calls: list[str] = []

    def preflight(self) -> None:
        pass

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        if not request.prompt:
            raise ValueError("prompt must be non-empty")
        self.calls.append(request.prompt)
        text = self._reply(request.prompt)
        return GenerationResponse(text=apply_stop_sequences(text, request.stop_sequences))

    # Individual rules -----------------------------------------------------

    def _reply(self, prompt: str) -> str:
        echo = self._echo(prompt)
        if echo is not None:
            return echo
        if "Action Input:" in prompt:
            return self._react_turn(prompt)
        if '"<number>: yes"' in prompt:
            return self._coverage(prompt)
        if "List the key points" in prompt:
            return self._key_points(prompt)
        if '"Score:' in prompt:
            return self._rubric_score(prompt)
        if "JSON array" in prompt:
            return self._draft_pairs(prompt)
        return f"Acknowledged ({self._hash_unit(prompt):.3f})."

    @staticmethod
    def _echo(prompt: str) -> str | None:
        idx = prompt.find("ECHO:")
        if idx == -1:
            return None
        rest = prompt[idx + len("ECHO:") :]
        return rest.splitlines()[0].strip() if rest else ""

    def _hash_unit(self, value: str) -> float:
        return (_stable_hash(self.seed, value) % 1001) / 1000.0

    def _react_turn(self, prompt: str) -> str:
        question = ""
        for line in prompt.splitlines():
            if line.startswith("Question:"):
                question = line[len("Question:") :].strip()
                break
        if "Observation:" in prompt:
            tail = prompt[prompt.rfind("Observation:") :]
            m = _OBSERVATION_PASSAGE_RE.search(tail)
            if m:
                answer = " ".join(m.group(2).split())
            else:
                answer = "The retrieved passages did not contain a precise answer."
            return f"Thought: The observation above answers the question.\nFinal Answer: {answer}"
        if "Confidence: [current confidence score 0-1]" in prompt:
            thought = (
                "Thought: Let me analyze step-by-step:\n"
                "1. Current Status:\n"
                "   - Progress: nothing tried yet\n"
                "   - Findings: none\n"
                f"   - Missing: information about {question or 'the question'}\n"
                "\n"
                "2. Strategy:\n"
                "   - Next tool: document_search\n"
                "   - Expected outcome: passages answering the question\n"
                "   - Confidence: 0.85\n"
                "   - Reasoning: the corpus should cover this directly"
            )
        else:
            thought = "Thought: I should search the corpus for this."
        return f"{thought}\nAction: document_search\nAction Input: {question}"

    def _coverage(self, prompt: str) -> str:
        sections = dict(_labeled_sections(prompt))
        points_block = sections.get("Points", "")
        text_tokens = set(content_tokens(sections.get("Text", "")))
        lines = []
        for line in points_block.splitlines():
            m = re.match(r"\s*(\d+)[.)]\s*(.*)", line)
            if not m:
                continue
            number, point = m.group(1), m.group(2)
            point_tokens = set(content_tokens(point))
            covered = bool(point_tokens) and len(point_tokens & text_tokens) >= 0.6 * len(point_tokens)
            lines.append(f"{number}: {'yes' if covered else 'no'}")
        return "\n".join(lines) if lines else "1: no"

    def _key_points(self, prompt: str) -> str:
        sections = dict(_labeled_sections(prompt))
        sentences = [s.strip() for s in split_sentences(sections.get("Text", "")) if s.strip()]
        if not sentences:
            return "- (no content)"
        return "\n".join(f"- {' '.join(s.split())}" for s in sentences[:8])

    def _rubric_score(self, prompt: str) -> str:
        sections = _labeled_sections(prompt)
        if len(sections) >= 2:
            a = set(content_tokens(sections[-2][1]))
            b = set(content_tokens(sections[-1][1]))
            if not a and not b:
                score = 1.0
            elif not a or not b:
                score = 0.0
            else:
                score = round(len(a & b) / min(len(a), len(b)), 4)
        else:
            score = self._hash_unit(prompt)
        return f"Score: {score}\nRationale: deterministic mock assessment."

    def _draft_pairs(self, prompt: str) -> str:
        m = _DRAFT_COUNT_RE.search(prompt)
        count = int(m.group(1)) if m else 1
        sections = dict(_labeled_sections(prompt))
        source = sections.get("Source material", "")
        sentences = [" ".join(s.split()) for s in split_sentences(source) if s.strip()]
        pairs = []
        for sentence in sentences[: max(1, count)]:
            words = sentence.split()
            topic = " ".join(words[:4]) if words else "the material"
            pairs.append({"question": f"What does the source state about {topic}?", "answer": sentence})
        return json.dumps(pairs)
