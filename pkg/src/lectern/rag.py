"""Retrieval orchestration and prompt assembly.

Three answering modes: Vanilla (no retrieval), TextRag (retrieved chunk
text in the prompt) and MultimodalRag (retrieval over slide text, slide
images handed to the generator instead of extracted text).
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .corpus import Chunk, ChunkKind, MaterialKind
from .embedding import EmbeddingProvider, embed_batch
from .index import VectorIndex, top_k
from .llm import CapabilityError, ChatRequest, ImagePart, TextPart
from .templates import TemplateSet, load_templates


class Mode(str, Enum):
    VANILLA = "vanilla"
    TEXT_RAG = "text_rag"
    MULTIMODAL_RAG = "multimodal_rag"

    @classmethod
    def parse(cls, value: str) -> "Mode":
        aliases = {"vanilla": cls.VANILLA, "text": cls.TEXT_RAG, "text_rag": cls.TEXT_RAG,
                   "multimodal": cls.MULTIMODAL_RAG, "multimodal_rag": cls.MULTIMODAL_RAG}
        try:
            return aliases[value.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown mode {value!r}") from None


class MaterialSelector(str, Enum):
    SLIDES = "slides"
    TRANSCRIPTS = "transcripts"
    POLISHED_TRANSCRIPTS = "polished_transcripts"
    MIXED = "mixed"

    def matches(self, material_kind: str) -> bool:
        if self is MaterialSelector.MIXED:
            return True
        return material_kind == {
            MaterialSelector.SLIDES: MaterialKind.SLIDE_DECK.value,
            MaterialSelector.TRANSCRIPTS: MaterialKind.TRANSCRIPT.value,
            MaterialSelector.POLISHED_TRANSCRIPTS: MaterialKind.POLISHED_TRANSCRIPT.value,
        }[self]


class StaleIndexError(Exception):
    """Index fingerprint does not match the configured embedder / store."""


class RagConfigError(ValueError):
    """Configuration violates a mode constraint."""


@dataclass
class RagConfig:
    k: int = 4
    max_chunk_tokens: int = 300
    mode: Mode = Mode.TEXT_RAG
    material_kind: MaterialSelector = MaterialSelector.SLIDES
    course_filter: Optional[str] = None
    generator: str = ""
    embedder: str = ""
    template_version: str = "v1"
    allow_mixed_languages: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise RagConfigError("k must be >= 1")
        if self.max_chunk_tokens < 1:
            raise RagConfigError("max_chunk_tokens must be >= 1")
        if self.mode is Mode.MULTIMODAL_RAG and self.material_kind is not MaterialSelector.SLIDES:
            raise RagConfigError("multimodal mode requires slide material")


@dataclass
class RetrievedContext:
    items: list[tuple[Chunk, float]] = field(default_factory=list)
    query_embedding_fingerprint: str = ""

    def __post_init__(self):
        scores = [score for _, score in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("retrieved items must be sorted by descending score")


@dataclass
class AssembledRequest:
    system_text: str
    user_text: str
    image_parts: list[str] = field(default_factory=list)  # image refs, score order
    provenance: list[str] = field(default_factory=list)  # chunk ids, score order
    template_version: str = "v1"

    def to_chat_request(self, max_new_tokens: int = 1024) -> ChatRequest:
        parts: list = [TextPart(self.user_text)]
        parts.extend(ImagePart.from_file(ref) for ref in self.image_parts)
        return ChatRequest(system=self.system_text, user_parts=parts, max_new_tokens=max_new_tokens)


def _embedding_fingerprint(vector: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(vector, dtype=np.float32).tobytes()).hexdigest()[:16]


def retrieve(
    question: str,
    cfg: RagConfig,
    index: VectorIndex,
    embedder: EmbeddingProvider,
    chunks_by_id: dict[str, Chunk],
) -> RetrievedContext:
    """Embed the question with the index's own embedder and rank chunks.

    Vanilla mode skips retrieval entirely. In multimodal mode only
    image-bearing slide records are eligible, so every retrieved item can
    be handed to the generator as an image.
    """
    if cfg.mode is Mode.VANILLA:
        return RetrievedContext()
    if cfg.embedder and cfg.embedder != index.embedder_id:
        raise StaleIndexError(
            f"index was built with embedder {index.embedder_id!r}, config wants {cfg.embedder!r}"
        )
    if embedder.identity != index.embedder_id:
        raise StaleIndexError(
            f"index was built with embedder {index.embedder_id!r}, got provider {embedder.identity!r}"
        )
    [query] = embed_batch([question], embedder)

    def predicate(meta: dict, language: Optional[str] = None) -> bool:
        if not cfg.material_kind.matches(meta.get("kind", "")):
            return False
        if cfg.course_filter and meta.get("course_id") != cfg.course_filter:
            return False
        if cfg.mode is Mode.MULTIMODAL_RAG and not meta.get("image_ref"):
            return False
        if language is not None and meta.get("language") != language:
            return False
        return True

    ranked = top_k(index, query, cfg.k, metadata_filter=predicate)
    if ranked and not cfg.allow_mixed_languages:
        languages = {index.get(cid).metadata.get("language") for cid, _ in ranked}
        if len(languages) > 1:
            lead = index.get(ranked[0][0]).metadata.get("language")
            ranked = top_k(index, query, cfg.k, metadata_filter=lambda m: predicate(m, language=lead))
    items = []
    for chunk_id, score in ranked:
        chunk = chunks_by_id.get(chunk_id)
        if chunk is None:
            raise KeyError(f"index references chunk {chunk_id!r} missing from the chunk store")
        items.append((chunk, score))
    return RetrievedContext(items=items, query_embedding_fingerprint=_embedding_fingerprint(query))


def _chunk_location(chunk: Chunk) -> str:
    if chunk.kind is ChunkKind.SLIDE:
        return f"slide p.{chunk.page_number}"
    start, end = chunk.span
    return f"sentences {start}-{end - 1}"


def assemble_prompt(
    question: str,
    ctx: RetrievedContext,
    cfg: RagConfig,
    templates: Optional[TemplateSet] = None,
) -> AssembledRequest:
    """Build the generator request: question and retrieved content in
    clearly separated sections, chunks in descending score order."""
    templates = templates or load_templates(cfg.template_version)
    system_text = templates.render("system")
    if cfg.mode is Mode.VANILLA:
        return AssembledRequest(
            system_text=system_text,
            user_text=templates.render("user_vanilla", question=question),
            template_version=templates.version,
        )
    instruction = templates.render("instruction")
    provenance = [chunk.chunk_id for chunk, _ in ctx.items]
    if not ctx.items:
        user_text = templates.render("user_vanilla", question=question) + templates.render("no_context_note")
        return AssembledRequest(system_text=system_text, user_text=user_text, template_version=templates.version)
    if cfg.mode is Mode.MULTIMODAL_RAG:
        missing = [c.chunk_id for c, _ in ctx.items if not c.image_ref]
        if missing:
            raise RagConfigError(f"multimodal context chunks without images: {missing}")
        user_text = templates.render("user_multimodal", question=question, instruction=instruction)
        return AssembledRequest(
            system_text=system_text,
            user_text=user_text,
            image_parts=[chunk.image_ref for chunk, _ in ctx.items],
            provenance=provenance,
            template_version=templates.version,
        )
    blocks = []
    for rank, (chunk, _score) in enumerate(ctx.items, start=1):
        course_id = chunk.material_ref.split("/", 1)[0]
        blocks.append(
            templates.render(
                "context_block",
                rank=str(rank),
                course_id=course_id,
                location=_chunk_location(chunk),
                text=chunk.text,
            )
        )
    user_text = templates.render(
        "user_text_rag",
        question=question,
        instruction=instruction,
        context_blocks="\n\n".join(blocks),
    )
    return AssembledRequest(
        system_text=system_text,
        user_text=user_text,
        provenance=provenance,
        template_version=templates.version,
    )


@dataclass
class AnswerResult:
    answer_text: str
    provenance: list[str]
    timing_ms: float
    mode: Mode
    scores: list[float] = field(default_factory=list)
    template_version: str = "v1"


class AnswerError(Exception):
    """Generator call failed; the assembled request is retained for retry."""

    def __init__(self, message: str, request: AssembledRequest):
        super().__init__(message)
        self.request = request


class RagEngine:
    """Binds config, index, chunk store and endpoints into answer()."""

    def __init__(
        self,
        cfg: RagConfig,
        index: VectorIndex,
        chunks: list[Chunk],
        embedder: EmbeddingProvider,
        generator,
        templates: Optional[TemplateSet] = None,
        run_log_path: Optional[str] = None,
        config_fingerprint: str = "",
    ):
        self.cfg = cfg
        self.index = index
        self.chunks_by_id = {c.chunk_id: c for c in chunks}
        self.embedder = embedder
        self.generator = generator
        self.templates = templates or load_templates(cfg.template_version)
        self.run_log_path = run_log_path
        self.config_fingerprint = config_fingerprint
        self._log_lock = threading.Lock()
        if cfg.mode is Mode.MULTIMODAL_RAG and not generator.endpoint.image_capable:
            raise RagConfigError(
                f"multimodal mode needs an image-capable generator, {generator.endpoint.id!r} is not"
            )

    def retrieve(self, question: str) -> RetrievedContext:
        return retrieve(question, self.cfg, self.index, self.embedder, self.chunks_by_id)

    def assemble(self, question: str, ctx: RetrievedContext) -> AssembledRequest:
        return assemble_prompt(question, ctx, self.cfg, self.templates)

    def answer(self, question: str, stream_sink=None) -> AnswerResult:
        started = time.monotonic()
        ctx = self.retrieve(question)
        request = self.assemble(question, ctx)
        chat_request = request.to_chat_request()
        try:
            if stream_sink is not None:
                response = self.generator.complete_stream(chat_request, stream_sink)
            else:
                response = self.generator.complete(chat_request)
        except CapabilityError:
            raise
        except Exception as exc:
            raise AnswerError(f"generation failed: {exc}", request) from exc
        result = AnswerResult(
            answer_text=response.text,
            provenance=list(request.provenance),
            timing_ms=round((time.monotonic() - started) * 1000, 3),
            mode=self.cfg.mode,
            scores=[score for _, score in ctx.items],
            template_version=request.template_version,
        )
        self._log(question, result)
        return result

    def sources(self, result: AnswerResult) -> list[dict]:
        """Provenance expanded to displayable source entries, score order."""
        entries = []
        for chunk_id, score in zip(result.provenance, result.scores):
            chunk = self.chunks_by_id[chunk_id]
            entry = {
                "chunk_id": chunk_id,
                "kind": chunk.kind.value,
                "score": score,
                "snippet": chunk.text[:240],
            }
            if chunk.page_number is not None:
                entry["page_number"] = chunk.page_number
            if chunk.image_ref is not None:
                entry["image_url"] = f"/api/slides/{chunk_id}/image"
            entries.append(entry)
        return entries

    def _log(self, question: str, result: AnswerResult) -> None:
        if not self.run_log_path:
            return
        record = {
            "ts": time.time(),
            "question": question,
            "answer": result.answer_text,
            "mode": result.mode.value,
            "k": self.cfg.k,
            "provenance": result.provenance,
            "template_version": result.template_version,
            "config_fingerprint": self.config_fingerprint,
            "timing_ms": result.timing_ms,
        }
        with self._log_lock:
            with open(self.run_log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
