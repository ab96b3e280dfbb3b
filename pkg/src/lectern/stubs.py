"""Deterministic scripted generators for offline runs.

Every pipeline test and the offline demo configuration talk to these
instead of a live endpoint. They honor the same surface as ChatClient
(complete / complete_stream, endpoint capability gate) so call sites do
not branch on stub-ness.
"""

from __future__ import annotations

import json
import re
from typing import Callable, Optional

from .llm import (
    CallbackSink,
    CapabilityError,
    ChatRequest,
    ChatResponse,
    GeneratorEndpoint,
    ImagePart,
)

CONTEXT_BLOCK_MARKER = "[Source "


def stub_endpoint(endpoint_id: str = "stub", image_capable: bool = False) -> GeneratorEndpoint:
    return GeneratorEndpoint(
        id=endpoint_id,
        base_url="stub:",
        model_name="scripted",
        image_capable=image_capable,
    )


class ScriptedGenerator:
    """Pure function of the request, selected by a behavior string.

    Behaviors:
      echo                  reply with the full user text
      prefix:<p>            reply with <p> + user text
      fixed:<text>          constant reply
      context-count         reply with the number of context blocks seen
      first-context         reply with the body of the highest-ranked block
      image-count           reply with the number of image parts
      map:<path>            JSON file of {substring: reply}, first match wins
    """

    def __init__(
        self,
        behavior: str = "echo",
        endpoint: Optional[GeneratorEndpoint] = None,
        stream_fragment_size: int = 8,
    ):
        self.behavior = behavior
        self.endpoint = endpoint or stub_endpoint()
        self.stream_fragment_size = max(1, stream_fragment_size)
        self.calls: list[ChatRequest] = []
        self._reply = self._compile(behavior)

    def _compile(self, behavior: str) -> Callable[[ChatRequest], str]:
        if behavior == "echo":
            return lambda req: req.user_text()
        if behavior.startswith("prefix:"):
            prefix = behavior[len("prefix:"):]
            return lambda req: prefix + req.user_text()
        if behavior.startswith("fixed:"):
            fixed = behavior[len("fixed:"):]
            return lambda req: fixed
        if behavior == "context-count":
            return lambda req: str(req.user_text().count(CONTEXT_BLOCK_MARKER))
        if behavior == "first-context":
            return _first_context_block
        if behavior == "image-count":
            return lambda req: str(sum(1 for p in req.user_parts if isinstance(p, ImagePart)))
        if behavior.startswith("map:"):
            with open(behavior[len("map:"):], encoding="utf-8") as fh:
                table = json.load(fh)
            def lookup(req: ChatRequest) -> str:
                text = req.user_text()
                for needle, reply in table.items():
                    if needle in text:
                        return reply
                return table.get("", "")
            return lookup
        raise ValueError(f"unknown stub behavior: {behavior!r}")

    def complete(self, req: ChatRequest) -> ChatResponse:
        self._gate(req)
        self.calls.append(req)
        return ChatResponse(text=self._reply(req))

    def complete_stream(self, req: ChatRequest, sink) -> ChatResponse:
        self._gate(req)
        self.calls.append(req)
        if callable(sink) and not hasattr(sink, "fragment"):
            sink = CallbackSink(sink)
        text = self._reply(req)
        size = self.stream_fragment_size
        for i in range(0, len(text), size):
            sink.fragment(text[i : i + size])
        return ChatResponse(text=text)

    def _gate(self, req: ChatRequest) -> None:
        if req.has_images() and not self.endpoint.image_capable:
            raise CapabilityError(f"stub endpoint {self.endpoint.id!r} is not image-capable")


class SequenceGenerator:
    """Replays a fixed list of outcomes; an Exception entry is raised.

    Used for fault-injection schedules (fail twice then succeed, abort on
    job N, ...).
    """

    def __init__(self, outcomes, endpoint: Optional[GeneratorEndpoint] = None):
        self.outcomes = list(outcomes)
        self.endpoint = endpoint or stub_endpoint()
        self.calls: list[ChatRequest] = []

    def complete(self, req: ChatRequest) -> ChatResponse:
        if req.has_images() and not self.endpoint.image_capable:
            raise CapabilityError(f"stub endpoint {self.endpoint.id!r} is not image-capable")
        self.calls.append(req)
        if not self.outcomes:
            raise RuntimeError("SequenceGenerator exhausted")
        item = self.outcomes.pop(0)
        if isinstance(item, Exception):
            raise item
        if callable(item):
            return ChatResponse(text=item(req))
        return ChatResponse(text=str(item))

    def complete_stream(self, req: ChatRequest, sink) -> ChatResponse:
        response = self.complete(req)
        if callable(sink) and not hasattr(sink, "fragment"):
            sink = CallbackSink(sink)
        if response.text:
            sink.fragment(response.text)
        return response


_BLOCK_RE = re.compile(r"\[Source \d+[^\]]*\]\n(.*?)(?=\n\n\[Source |\n*$)", re.DOTALL)


def _first_context_block(req: ChatRequest) -> str:
    m = _BLOCK_RE.search(req.user_text())
    return m.group(1).strip() if m else ""


def make_stub_generator(behavior: str, endpoint_id: str = "stub", image_capable: bool = False) -> ScriptedGenerator:
    return ScriptedGenerator(behavior, endpoint=stub_endpoint(endpoint_id, image_capable))
