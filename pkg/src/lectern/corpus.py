"""Course material ingestion: slide decks, transcripts, chunking, polishing.

Slides map 1:1 to chunks. Transcripts are segmented at sentence
boundaries into windows of at most ``max_tokens`` tokens with a trailing
sentence overlap between consecutive windows. Transcript polishing runs
five-sentence windows through a generator, threading each window's output
into the next prompt.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

from .llm import ChatError, ChatRequest, TextPart
from .sentences import split_sentences
from .templates import TemplateSet, load_templates
from .tokens import DEFAULT_COUNTER, TokenCounter

POLISH_WINDOW_SENTENCES = 5
PREVIOUS_SLOT = "{previous_synthetic}"


class Language(str, Enum):
    EN = "en"
    DE = "de"


class MaterialKind(str, Enum):
    SLIDE_DECK = "slide_deck"
    TRANSCRIPT = "transcript"
    POLISHED_TRANSCRIPT = "polished_transcript"


class ChunkKind(str, Enum):
    SLIDE = "slide"
    TRANSCRIPT_WINDOW = "transcript_window"


@dataclass(frozen=True)
class CourseMaterial:
    course_id: str
    language: Language
    kind: MaterialKind
    source_path: str

    def __post_init__(self):
        if not self.course_id:
            raise ValueError("course_id must be non-empty")
        if "/" in self.course_id:
            raise ValueError("course_id must not contain '/'")

    @property
    def material_id(self) -> str:
        stem = Path(self.source_path).name or "unnamed"
        return f"{self.course_id}/{self.language.value}/{self.kind.value}/{stem}"


def parse_material_ref(material_ref: str) -> tuple[str, str, str]:
    """Return (course_id, language, material kind) from a material id."""
    parts = material_ref.split("/", 3)
    if len(parts) < 3:
        return material_ref, "", ""
    return parts[0], parts[1], parts[2]


@dataclass(frozen=True)
class SlidePage:
    deck_id: str
    page_number: int
    text: str
    image_ref: Optional[str] = None

    def __post_init__(self):
        if self.page_number < 1:
            raise ValueError(f"page_number must be >= 1, got {self.page_number}")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    material_ref: str
    kind: ChunkKind
    text: str
    token_count: int
    page_number: Optional[int] = None
    span: Optional[tuple[int, int]] = None  # half-open sentence index range
    image_ref: Optional[str] = None
    oversized: bool = False

    def __post_init__(self):
        if self.token_count < 0:
            raise ValueError("token_count must be >= 0")
        if self.kind is ChunkKind.SLIDE and self.page_number is None:
            raise ValueError("slide chunk requires page_number")
        if self.kind is ChunkKind.TRANSCRIPT_WINDOW and self.span is None:
            raise ValueError("transcript window chunk requires span")


def _text_hash(text: str) -> str:
    return hashlib.blake2b(text.encode("utf-8"), digest_size=5).hexdigest()


def slide_to_chunk(page: SlidePage, deck: CourseMaterial, counter: TokenCounter = DEFAULT_COUNTER) -> Chunk:
    """One slide page, one chunk. Empty-text slides stay addressable for
    multimodal use; their zero token count keeps them out of scoring."""
    chunk_id = f"{page.deck_id}-p{page.page_number:04d}-{_text_hash(page.text)}"
    return Chunk(
        chunk_id=chunk_id,
        material_ref=deck.material_id,
        kind=ChunkKind.SLIDE,
        text=page.text,
        token_count=counter.count(page.text),
        page_number=page.page_number,
        image_ref=page.image_ref,
    )


def segment_transcript(
    text: str,
    max_tokens: int,
    overlap_fraction: float,
    material: Optional[CourseMaterial] = None,
    counter: TokenCounter = DEFAULT_COUNTER,
) -> list[Chunk]:
    """Segment a transcript into sentence-aligned windows.

    Windows hold at most ``max_tokens`` tokens (a lone sentence beyond
    that becomes its own chunk, flagged oversized). Consecutive windows
    share the smallest trailing-sentence suffix reaching
    ``overlap_fraction * max_tokens`` tokens, capped at all-but-one
    sentence of the earlier window and shrunk when the following sentence
    would otherwise not fit. The window size ceiling always wins over the
    overlap target.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    if not 0 <= overlap_fraction < 0.5:
        raise ValueError("overlap_fraction must be in [0, 0.5)")
    sentences = split_sentences(text)
    if not sentences:
        return []
    tok = [counter.count(s) for s in sentences]
    material_ref = material.material_id if material else "transcript"
    id_stem = material_ref.replace("/", ".")  # chunk ids travel in URL paths
    target = overlap_fraction * max_tokens

    chunks: list[Chunk] = []
    n = len(sentences)
    start = 0
    while start < n:
        # greedy fill up to max_tokens
        end = start
        total = 0
        while end < n:
            if end == start and tok[end] > max_tokens:
                end += 1
                total = tok[end - 1]
                break
            if total + tok[end] > max_tokens:
                break
            total += tok[end]
            end += 1
        window_text = " ".join(sentences[start:end])
        oversized = end - start == 1 and tok[start] > max_tokens
        chunks.append(
            Chunk(
                chunk_id=f"{id_stem}-s{start:05d}-e{end:05d}-{_text_hash(window_text)}",
                material_ref=material_ref,
                kind=ChunkKind.TRANSCRIPT_WINDOW,
                text=window_text,
                token_count=sum(tok[start:end]),
                span=(start, end),
                oversized=oversized,
            )
        )
        if end >= n:
            break
        # smallest trailing suffix reaching the overlap target, at most
        # all-but-one sentence of the chunk just emitted
        s = end
        acc = 0
        while s > start + 1 and acc < target:
            s -= 1
            acc += tok[s]
        if tok[end] > max_tokens:
            s = end  # next sentence is oversized: it must stand alone
        else:
            while s < end and sum(tok[s:end]) + tok[end] > max_tokens:
                s += 1
        start = s
    return chunks


_WS_RE = re.compile(r"\s+")


def clean_transcript(raw: str, repeat_threshold: int) -> tuple[str, list[int]]:
    """Collapse runs of near-identical sentences (ASR hallucination sweep).

    Sentences whose normalized form repeats ``repeat_threshold`` or more
    times consecutively are reduced to a single occurrence. Returns the
    cleaned text and the removed sentence indices for human review.
    """
    if repeat_threshold < 2:
        raise ValueError("repeat_threshold must be >= 2")
    sentences = split_sentences(raw)
    normalized = [_WS_RE.sub(" ", s.lower()).strip() for s in sentences]
    kept: list[str] = []
    flagged: list[int] = []
    i = 0
    while i < len(sentences):
        j = i
        while j < len(sentences) and normalized[j] == normalized[i]:
            j += 1
        run = j - i
        kept.append(sentences[i])
        if run >= repeat_threshold:
            flagged.extend(range(i + 1, j))
        else:
            kept.extend(sentences[i + 1 : j])
        i = j
    return " ".join(kept), flagged


@dataclass
class PolishJob:
    window: list[str]
    previous_synthetic: Optional[str]
    prompt: str

    def __post_init__(self):
        if len(self.window) > POLISH_WINDOW_SENTENCES:
            raise ValueError("polish window holds at most five sentences")


def build_polish_jobs(sentences: list[str], templates: Optional[TemplateSet] = None) -> list[PolishJob]:
    """Five-sentence polishing windows; each prompt after the first embeds
    the slot the runner fills with the preceding window's output."""
    templates = templates or load_templates()
    jobs = []
    for i in range(0, len(sentences), POLISH_WINDOW_SENTENCES):
        window = sentences[i : i + POLISH_WINDOW_SENTENCES]
        window_text = " ".join(window)
        if i == 0:
            prompt = templates.render("polish_first", window=window_text)
            previous = None
        else:
            prompt = templates.render("polish_continue", window=window_text, previous_synthetic=PREVIOUS_SLOT)
            previous = None  # filled by the runner once the prior job completes
        jobs.append(PolishJob(window=window, previous_synthetic=previous, prompt=prompt))
    return jobs


class PolishAborted(Exception):
    """Generator failed mid-run; carries what completed and where to resume."""

    def __init__(self, message: str, completed: list[str], resume_index: int):
        super().__init__(message)
        self.completed = completed
        self.resume_index = resume_index


@dataclass
class PolishResult:
    windows: list[str]
    text: str


def run_polish(jobs: list[PolishJob], generator, completed: Optional[list[str]] = None) -> PolishResult:
    """Execute polish jobs strictly in order (carry-over dependency).

    ``completed`` resumes a previously aborted run: those outputs are kept
    and execution starts at ``len(completed)``. On generator failure the
    raised PolishAborted preserves all finished windows and the index of
    the job to retry. The job list is updated in place with the filled
    prompts actually sent.
    """
    outputs = list(completed or [])
    if len(outputs) > len(jobs):
        raise ValueError("more completed outputs than jobs")
    for i in range(len(outputs), len(jobs)):
        job = jobs[i]
        prompt = job.prompt
        if i > 0:
            previous = outputs[i - 1]
            prompt = prompt.replace(PREVIOUS_SLOT, previous)
            job = replace(job, previous_synthetic=previous, prompt=prompt)
            jobs[i] = job
        request = ChatRequest(system="", user_parts=[TextPart(prompt)])
        try:
            response = generator.complete(request)
        except ChatError as exc:
            raise PolishAborted(f"polishing aborted on job {i}: {exc}", completed=outputs, resume_index=i) from exc
        outputs.append(response.text)
    return PolishResult(windows=outputs, text=" ".join(outputs))


# -- deck manifests, transcripts, chunk store ------------------------------


def load_deck_manifest(path: str) -> list[SlidePage]:
    """Deck manifest: newline-delimited JSON {deck_id, page_number, text, image_ref?}."""
    pages = []
    seen: set[tuple[str, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            page = SlidePage(
                deck_id=rec["deck_id"],
                page_number=int(rec["page_number"]),
                text=rec.get("text", ""),
                image_ref=rec.get("image_ref"),
            )
            key = (page.deck_id, page.page_number)
            if key in seen:
                raise ValueError(f"{path}:{line_no}: duplicate page {key}")
            seen.add(key)
            pages.append(page)
    return pages


def load_transcript_sidecar(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    for key in ("course_id", "language", "kind"):
        if key not in meta:
            raise ValueError(f"transcript sidecar {path} missing {key!r}")
    return meta


def chunk_to_record(chunk: Chunk) -> dict:
    rec = {
        "chunk_id": chunk.chunk_id,
        "material_ref": chunk.material_ref,
        "kind": chunk.kind.value,
        "text": chunk.text,
        "token_count": chunk.token_count,
    }
    if chunk.page_number is not None:
        rec["page_number"] = chunk.page_number
    if chunk.span is not None:
        rec["span"] = list(chunk.span)
    if chunk.image_ref is not None:
        rec["image_ref"] = chunk.image_ref
    if chunk.oversized:
        rec["oversized"] = True
    return rec


def chunk_from_record(rec: dict) -> Chunk:
    span = rec.get("span")
    return Chunk(
        chunk_id=rec["chunk_id"],
        material_ref=rec["material_ref"],
        kind=ChunkKind(rec["kind"]),
        text=rec["text"],
        token_count=rec["token_count"],
        page_number=rec.get("page_number"),
        span=tuple(span) if span else None,
        image_ref=rec.get("image_ref"),
        oversized=rec.get("oversized", False),
    )


def write_chunk_store(chunks: list[Chunk], path: str) -> None:
    """Newline-delimited JSON, canonical key order; atomic replace."""
    ids = set()
    for chunk in chunks:
        if chunk.chunk_id in ids:
            raise ValueError(f"duplicate chunk_id {chunk.chunk_id!r}")
        ids.add(chunk.chunk_id)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(json.dumps(chunk_to_record(chunk), sort_keys=True, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def read_chunk_store(path: str) -> list[Chunk]:
    chunks = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                chunks.append(chunk_from_record(json.loads(line)))
    return chunks


def chunk_store_version(path: str) -> str:
    """Content hash of the store file; part of the index fingerprint."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()[:16]


def chunks_version(chunks: list[Chunk]) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(json.dumps(chunk_to_record(chunk), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]
