"""Corpus loading and sentence-aligned chunking.

Documents are split into overlapping chunks measured in word tokens, with
chunk boundaries snapped to sentence starts so each chunk stays readable on
its own. Everything here is pure and deterministic: the same file bytes and
parameters always produce the same chunk list.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 256
DEFAULT_OVERLAP = 50

SUPPORTED_SUFFIXES = (".txt", ".md")

# A token is either a run of word characters or a single punctuation mark.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_WORD_RE = re.compile(r"\w+", re.UNICODE)

# Words that commonly precede an abbreviating period and must not end a sentence.
_ABBREVIATIONS = frozenset(
    "mr mrs ms dr prof sr jr st no vs etc al fig eq sec approx inc ltd co dept est".split()
)


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str
    source_path: str


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_span: tuple[int, int]  # [start, end) in the document token sequence
    token_count: int


def tokenize(text: str) -> list[str]:
    """Split text into word tokens; punctuation marks come out as their own tokens."""
    return _TOKEN_RE.findall(text)


def content_tokens(text: str) -> list[str]:
    """Lowercased word tokens only (no punctuation), for matching operations."""
    return [t.lower() for t in _WORD_RE.findall(text)]


def _token_spans(text: str) -> list[tuple[int, int]]:
    """Character span of every token, in document order."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def split_sentences(text: str) -> list[str]:
    """Split text into sentences using terminal punctuation and blank lines."""
    spans = _token_spans(text)
    starts = sentence_token_starts(text, spans)
    out = []
    for i, s in enumerate(starts):
        e = starts[i + 1] if i + 1 < len(starts) else len(spans)
        lo = spans[s][0]
        hi = spans[e - 1][1]
        out.append(text[lo:hi])
    return out


def sentence_token_starts(text: str, spans: list[tuple[int, int]] | None = None) -> list[int]:
    """Token indexes at which sentences begin. The first index is always 0.

    Boundary rules: a sentence ends after terminal punctuation (. ! ?) plus any
    closing quotes or brackets, provided whitespace and then an uppercase
    letter, digit, or opening quote follow. A period directly after a known
    abbreviation does not end a sentence. A blank line always does.
    """
    if spans is None:
        spans = _token_spans(text)
    if not spans:
        return []

    starts = [0]
    n = len(spans)
    for i in range(n - 1):
        tok_lo, tok_hi = spans[i]
        tok = text[tok_lo:tok_hi]
        next_lo = spans[i + 1][0]
        gap = text[tok_hi:next_lo]

        if "\n" in gap and re.search(r"\n[ \t]*\n", gap):
            starts.append(i + 1)
            continue

        if tok not in (".", "!", "?"):
            continue
        # Skip past closing quotes/brackets that belong to this sentence.
        j = i
        while j + 1 < n:
            nxt = text[spans[j + 1][0] : spans[j + 1][1]]
            if nxt in ('"', "'", ")", "]", "”", "’"):
                j += 1
            else:
                break
        if j + 1 >= n:
            break
        if tok == ".":
            prev = text[spans[i - 1][0] : spans[i - 1][1]].lower() if i > 0 else ""
            if prev in _ABBREVIATIONS:
                continue
        boundary_gap = text[spans[j][1] : spans[j + 1][0]]
        if not boundary_gap:  # no whitespace after the punctuation (e.g. "3.14")
            continue
        follower = text[spans[j + 1][0]]
        if follower.isupper() or follower.isdigit() or follower in ('"', "'", "(", "“", "‘"):
            if j + 1 > starts[-1]:
                starts.append(j + 1)
    return starts


_MD_PATTERNS = [
    (re.compile(r"^```.*$", re.MULTILINE), ""),                  # code fence markers
    (re.compile(r"!\[([^\]]*)\]\([^)]*\)"), r"\1"),              # images -> alt text
    (re.compile(r"\[([^\]]+)\]\([^)]*\)"), r"\1"),               # links -> link text
    (re.compile(r"^#{1,6}[ \t]+(.*)$", re.MULTILINE), r"\1\n"),  # headings own a paragraph
    (re.compile(r"^[ \t]*[-*+][ \t]+", re.MULTILINE), ""),       # list bullets
    (re.compile(r"^>[ \t]?", re.MULTILINE), ""),                 # blockquote markers
    (re.compile(r"`([^`]*)`"), r"\1"),                            # inline code
    (re.compile(r"(\*\*|__)(.+?)\1"), r"\2"),                     # bold
    (re.compile(r"(\*|_)(.+?)\1"), r"\2"),                        # italics
    (re.compile(r"<[^>\n]+>"), ""),                               # inline HTML tags
]


def strip_markdown(text: str) -> str:
    for pattern, repl in _MD_PATTERNS:
        text = pattern.sub(repl, text)
    return text


def load_corpus(directory_path: str | Path) -> list[Document]:
    """Load every .txt/.md file under the directory into Documents.

    Ordering is lexicographic by relative path. Files that are empty after
    whitespace normalization are skipped with a warning.
    """
    root = Path(directory_path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus path not found: {root}")

    paths = sorted(
        p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in SUPPORTED_SUFFIXES
    )
    documents = []
    for path in paths:
        raw = path.read_text(encoding="utf-8")
        text = raw.replace("\r\n", "\n").replace("\r", "\n")
        if path.suffix.lower() == ".md":
            text = strip_markdown(text)
        if not text.strip():
            logger.warning("skipping empty document: %s", path)
            continue
        doc_id = path.relative_to(root).as_posix()
        documents.append(
            Document(doc_id=doc_id, title=path.stem, text=text, source_path=str(path))
        )
    if not documents:
        raise ValueError(f"no readable documents found under {root}")
    return documents


def chunk_document(
    doc: Document,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Chunk]:
    """Split a document into sentence-aligned chunks of at most chunk_size tokens.

    Whole sentences are packed greedily until the next one would overflow the
    budget. Each following chunk starts `overlap` tokens before the previous
    chunk's end, snapped backward to the nearest sentence start; a single
    sentence longer than chunk_size is hard-split at token boundaries.
    """
    if not 0 <= overlap < chunk_size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < chunk_size, got {overlap}/{chunk_size}")

    spans = _token_spans(doc.text)
    n = len(spans)
    if n == 0:
        return []
    sent_starts = sentence_token_starts(doc.text, spans)
    # Sentence boundaries usable as chunk ends: every sentence start plus EOF.
    ends = sent_starts[1:] + [n]

    chunks = []
    start = 0
    while True:
        budget = start + chunk_size
        # Largest sentence end within the budget; hard-split when even the
        # current sentence runs past it.
        fitting = [e for e in ends if start < e <= budget]
        end = max(fitting) if fitting else min(budget, n)

        lo = spans[start][0]
        hi = spans[end - 1][1]
        chunks.append(
            Chunk(
                chunk_id=f"{doc.doc_id}::c{len(chunks)}",
                doc_id=doc.doc_id,
                text=doc.text[lo:hi],
                token_span=(start, end),
                token_count=end - start,
            )
        )
        if end >= n:
            break

        raw = end - overlap
        candidates = [s for s in sent_starts if start < s <= raw]
        if candidates:
            next_start = max(candidates)
        elif raw > start:
            next_start = raw  # mid-sentence continuation of a hard split
        else:
            next_start = end  # degenerate tiny chunk; continue without overlap
        start = next_start
    return chunks


def chunk_corpus(
    documents: list[Document],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Chunk]:
    chunks = []
    for doc in documents:
        chunks.extend(chunk_document(doc, chunk_size=chunk_size, overlap=overlap))
    return chunks
