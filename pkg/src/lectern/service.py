"""HTTP service over the assistant: ask, evidence lookup, slide images.

A thin adapter: every answer is produced by the same engine call the CLI
uses, and no endpoint mutates the chunk store or index. Streaming uses
server-sent events: token frames followed by one final frame carrying the
sources.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response, StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .config import AppConfig, make_embedder, make_generator
from .corpus import ChunkKind, chunk_store_version, parse_material_ref, read_chunk_store
from .index import index_fingerprint, load_index
from .llm import CapabilityError, ChatError, sniff_media_type
from .rag import AnswerError, Mode, RagConfigError, RagEngine, StaleIndexError
from .templates import load_templates


class AskRequest(BaseModel):
    question: str = Field(min_length=1)
    course_id: Optional[str] = None
    mode: Optional[str] = None
    k: Optional[int] = None
    stream: bool = False


class ServiceState:
    """Immutable per-load snapshot: chunk store, index, engine factory."""

    def __init__(self, config: AppConfig):
        self.config = config
        self.chunks = read_chunk_store(config.chunk_store)
        self.index = load_index(config.index_path)
        self.embedder = make_embedder(config.embedder)
        self.generator = make_generator(config.generator, log_path=config.run_log or None)
        self.templates = load_templates(
            config.rag.template_version, root=config.template_root or None
        )
        self.by_id = {c.chunk_id: c for c in self.chunks}
        self.loaded_at = time.time()
        self.store_version = chunk_store_version(config.chunk_store)

    def engine_for(self, mode: Mode, k: Optional[int], course_id: Optional[str]) -> RagEngine:
        cfg = replace(
            self.config.rag,
            mode=mode,
            k=k if k is not None else self.config.rag.k,
            course_filter=course_id if course_id is not None else self.config.rag.course_filter,
        )
        return RagEngine(
            cfg,
            self.index,
            self.chunks,
            self.embedder,
            self.generator,
            templates=self.templates,
            run_log_path=self.config.run_log or None,
            config_fingerprint=self.config.fingerprint(),
        )

    def check_index_fresh(self) -> None:
        expected = index_fingerprint(self.embedder.identity, self.store_version)
        if self.index.fingerprint != expected:
            raise StaleIndexError(
                f"index fingerprint {self.index.fingerprint!r} does not match "
                f"current store/embedder {expected!r}"
            )


def create_app(config: AppConfig) -> FastAPI:
    app = FastAPI(title="lectern", docs_url=None, redoc_url=None)
    app.state.snapshot = ServiceState(config)

    if config.cors_origin:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=[config.cors_origin],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    def snapshot() -> ServiceState:
        return app.state.snapshot

    @app.get("/healthz")
    def healthz():
        state = snapshot()
        return {"status": "ok", "chunks": len(state.chunks), "index_fingerprint": state.index.fingerprint}

    @app.get("/api/courses")
    def courses():
        state = snapshot()
        table: dict[str, dict] = {}
        for chunk in state.chunks:
            course_id, language, kind = parse_material_ref(chunk.material_ref)
            entry = table.setdefault(course_id, {"course_id": course_id, "kinds": {}, "chunk_count": 0})
            entry["kinds"][kind] = entry["kinds"].get(kind, 0) + 1
            entry["chunk_count"] += 1
        generator = state.generator.endpoint
        return {
            "courses": sorted(table.values(), key=lambda e: e["course_id"]),
            "generator": {"id": generator.id, "image_capable": generator.image_capable},
            "default_mode": state.config.rag.mode.value,
            "default_k": state.config.rag.k,
        }

    @app.get("/api/chunks/{chunk_id}")
    def get_chunk(chunk_id: str):
        state = snapshot()
        chunk = state.by_id.get(chunk_id)
        if chunk is None:
            raise HTTPException(status_code=404, detail=f"unknown chunk {chunk_id!r}")
        record = {
            "chunk_id": chunk.chunk_id,
            "material_ref": chunk.material_ref,
            "kind": chunk.kind.value,
            "text": chunk.text,
            "token_count": chunk.token_count,
            "page_number": chunk.page_number,
            "span": list(chunk.span) if chunk.span else None,
            "image_url": f"/api/slides/{chunk.chunk_id}/image" if chunk.image_ref else None,
        }
        return record

    @app.get("/api/slides/{chunk_id}/image")
    def slide_image(chunk_id: str):
        state = snapshot()
        chunk = state.by_id.get(chunk_id)
        if chunk is None:
            raise HTTPException(status_code=404, detail=f"unknown chunk {chunk_id!r}")
        if chunk.kind is not ChunkKind.SLIDE or not chunk.image_ref:
            raise HTTPException(status_code=410, detail="chunk has no slide image")
        image_path = Path(chunk.image_ref)
        if not image_path.is_file():
            raise HTTPException(status_code=410, detail="slide image file missing")
        raw = image_path.read_bytes()
        return Response(content=raw, media_type=sniff_media_type(raw))

    def _prepare(req: AskRequest) -> tuple[RagEngine, Mode]:
        state = snapshot()
        try:
            mode = Mode.parse(req.mode) if req.mode else state.config.rag.mode
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if req.k is not None and req.k < 1:
            raise HTTPException(status_code=400, detail="k must be >= 1")
        try:
            state.check_index_fresh()
        except StaleIndexError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        try:
            engine = state.engine_for(mode, req.k, req.course_id)
        except (RagConfigError, CapabilityError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return engine, mode

    @app.post("/api/ask")
    def ask(req: AskRequest):
        engine, mode = _prepare(req)
        if req.stream:
            return StreamingResponse(_stream_answer(engine, req), media_type="text/event-stream")
        started = time.monotonic()
        try:
            result = engine.answer(req.question)
        except (CapabilityError, RagConfigError) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except StaleIndexError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except (AnswerError, ChatError) as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        return {
            "answer": result.answer_text,
            "sources": engine.sources(result),
            "mode": mode.value,
            "timing_ms": round((time.monotonic() - started) * 1000, 3),
        }

    def _stream_answer(engine: RagEngine, req: AskRequest):
        frames: queue.Queue = queue.Queue()
        outcome: dict = {}

        class QueueSink:
            def fragment(self, text: str) -> None:
                frames.put(("token", text))

            def abort(self, error: Exception) -> None:
                pass

        def work():
            try:
                outcome["result"] = engine.answer(req.question, stream_sink=QueueSink())
            except Exception as exc:
                outcome["error"] = exc
            finally:
                frames.put(("done", None))

        started = time.monotonic()
        worker = threading.Thread(target=work, daemon=True)
        worker.start()
        while True:
            kind, payload = frames.get()
            if kind == "done":
                break
            yield _sse({"type": "token", "text": payload})
        worker.join()
        error = outcome.get("error")
        if error is not None:
            status = 400 if isinstance(error, (CapabilityError, RagConfigError)) else 503
            yield _sse({"type": "error", "status": status, "detail": str(error)})
            return
        result = outcome["result"]
        yield _sse(
            {
                "type": "final",
                "answer": result.answer_text,
                "sources": engine.sources(result),
                "mode": result.mode.value,
                "timing_ms": round((time.monotonic() - started) * 1000, 3),
            }
        )

    @app.post("/api/admin/reload")
    def reload_state():
        app.state.snapshot = ServiceState(config)
        return {"status": "reloaded", "index_fingerprint": app.state.snapshot.index.fingerprint}

    @app.exception_handler(StaleIndexError)
    def stale_index_handler(_request: Request, exc: StaleIndexError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    frontend = config.frontend_dir
    if frontend and Path(frontend).is_dir():
        app.mount("/", StaticFiles(directory=frontend, html=True), name="ui")

    return app


def _sse(payload: dict) -> str:
    return f"data: {json.dumps(payload, ensure_ascii=False)}\n\n"
