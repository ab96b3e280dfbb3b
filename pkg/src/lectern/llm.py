"""Chat-completion wire client used by answering, polishing and grading.

Speaks the common chat-completions JSON protocol (messages array, typed
content parts, SSE streaming). Every caller goes through the same
``complete`` / ``complete_stream`` surface so scripted stand-ins can be
swapped in for offline runs.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Protocol, Union

import requests

log = logging.getLogger(__name__)


class ChatError(Exception):
    """Base class for generation failures."""


class CapabilityError(ChatError):
    """Request needs a capability the endpoint does not have."""


class PermanentChatError(ChatError):
    """Non-retryable failure (4xx, malformed response)."""


class TransientChatError(ChatError):
    """Retryable failure (timeout, connection error, 5xx)."""


class TransientExhaustedError(ChatError):
    """Transient failures persisted beyond the retry budget."""


class StreamAbortedError(ChatError):
    """Stream broke mid-flight; partial text is not canonical."""

    def __init__(self, message: str, partial_text: str = ""):
        super().__init__(message)
        self.partial_text = partial_text


@dataclass(frozen=True)
class GeneratorEndpoint:
    id: str
    base_url: str
    model_name: str
    image_capable: bool = False
    max_context_tokens: int = 8192
    auth_env: Optional[str] = None
    request_timeout: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 4


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    """Either a URI or an inline base64 payload; media_type required for inline."""

    uri: Optional[str] = None
    data_base64: Optional[str] = None
    media_type: str = "image/png"

    def __post_init__(self):
        if (self.uri is None) == (self.data_base64 is None):
            raise ValueError("ImagePart needs exactly one of uri or data_base64")

    @classmethod
    def from_file(cls, path: str) -> "ImagePart":
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls(data_base64=base64.b64encode(raw).decode("ascii"), media_type=sniff_media_type(raw))


Part = Union[TextPart, ImagePart]


@dataclass
class ChatRequest:
    system: str
    user_parts: list[Part]
    temperature: float = 0.0
    max_new_tokens: int = 1024

    def __post_init__(self):
        if not self.user_parts:
            raise ValueError("ChatRequest needs at least one user part")

    def has_images(self) -> bool:
        return any(isinstance(p, ImagePart) for p in self.user_parts)

    def user_text(self) -> str:
        return "\n".join(p.text for p in self.user_parts if isinstance(p, TextPart))


@dataclass
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    usage: dict = field(default_factory=dict)
    retry_count: int = 0


class StreamSink(Protocol):
    def fragment(self, text: str) -> None: ...
    def abort(self, error: Exception) -> None: ...


class CallbackSink:
    """Adapts a plain callable to the sink protocol."""

    def __init__(self, on_fragment: Callable[[str], None]):
        self._on_fragment = on_fragment

    def fragment(self, text: str) -> None:
        self._on_fragment(text)

    def abort(self, error: Exception) -> None:
        pass


_SIGNATURES = [(b"\x89PNG\r\n\x1a\n", "image/png"), (b"\xff\xd8\xff", "image/jpeg"),
               (b"GIF8", "image/gif"), (b"BM", "image/bmp"), (b"RIFF", "image/webp")]


def sniff_media_type(raw: bytes) -> str:
    for sig, media in _SIGNATURES:
        if raw.startswith(sig):
            return media
    return "application/octet-stream"


def _encode_part(part: Part) -> dict:
    if isinstance(part, TextPart):
        return {"type": "text", "text": part.text}
    url = part.uri if part.uri else f"data:{part.media_type};base64,{part.data_base64}"
    return {"type": "image_url", "image_url": {"url": url}}


def build_payload(endpoint: GeneratorEndpoint, req: ChatRequest, stream: bool = False) -> dict:
    messages = []
    if req.system:
        messages.append({"role": "system", "content": req.system})
    messages.append({"role": "user", "content": [_encode_part(p) for p in req.user_parts]})
    payload = {
        "model": endpoint.model_name,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_new_tokens,
    }
    if stream:
        payload["stream"] = True
    return payload


class Transport(Protocol):
    def post(self, url: str, payload: dict, headers: dict, timeout: float) -> dict: ...

    def post_stream(self, url: str, payload: dict, headers: dict, timeout: float) -> Iterator[dict]: ...


class HttpTransport:
    """requests-backed transport; maps HTTP failures onto the retry taxonomy."""

    def __init__(self, session: Optional[requests.Session] = None):
        self._session = session or requests.Session()

    def post(self, url, payload, headers, timeout):
        try:
            resp = self._session.post(url, json=payload, headers=headers, timeout=timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientChatError(str(exc)) from exc
        self._raise_for_status(resp)
        return resp.json()

    def post_stream(self, url, payload, headers, timeout):
        try:
            resp = self._session.post(url, json=payload, headers=headers, timeout=timeout, stream=True)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientChatError(str(exc)) from exc
        self._raise_for_status(resp)

        def events():
            try:
                for line in resp.iter_lines(decode_unicode=True):
                    if not line or not line.startswith("data:"):
                        continue
                    data = line[len("data:"):].strip()
                    if data == "[DONE]":
                        return
                    yield json.loads(data)
            except requests.RequestException as exc:
                raise TransientChatError(str(exc)) from exc

        return events()

    @staticmethod
    def _raise_for_status(resp):
        if resp.status_code >= 500:
            raise TransientChatError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise PermanentChatError(f"client error {resp.status_code}: {resp.text[:200]}")


class ChatClient:
    """Retrying client bound to one endpoint.

    Thread-safe; a bounded semaphore enforces the per-endpoint in-flight
    ceiling. Retries apply only to whole-request failures, never after a
    stream has begun delivering fragments.
    """

    def __init__(
        self,
        endpoint: GeneratorEndpoint,
        transport: Optional[Transport] = None,
        log_path: Optional[str] = None,
        backoff_base: float = 0.5,
    ):
        self.endpoint = endpoint
        self._transport = transport or HttpTransport()
        self._log_path = log_path
        self._backoff_base = backoff_base
        self._admission = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._log_lock = threading.Lock()

    # -- public API ---------------------------------------------------

    def complete(self, req: ChatRequest) -> ChatResponse:
        self._gate(req)
        payload = build_payload(self.endpoint, req)
        started = time.monotonic()
        with self._admission:
            body, retries = self._post_with_retries(payload)
        response = self._parse_response(body, retries)
        self._log_call(req, response, started, stream=False)
        return response

    def complete_stream(self, req: ChatRequest, sink) -> ChatResponse:
        self._gate(req)
        if callable(sink) and not hasattr(sink, "fragment"):
            sink = CallbackSink(sink)
        payload = build_payload(self.endpoint, req, stream=True)
        started = time.monotonic()
        pieces: list[str] = []
        finish_reason = "stop"
        with self._admission:
            try:
                for event in self._transport.post_stream(self._chat_url(), payload, self._headers(), self.endpoint.request_timeout):
                    for choice in event.get("choices", []):
                        delta = choice.get("delta", {})
                        text = delta.get("content")
                        if text:
                            pieces.append(text)
                            sink.fragment(text)
                        if choice.get("finish_reason"):
                            finish_reason = choice["finish_reason"]
            except ChatError as exc:
                aborted = StreamAbortedError(str(exc), partial_text="".join(pieces))
                sink.abort(aborted)
                raise aborted from exc
        response = ChatResponse(text="".join(pieces), finish_reason=finish_reason)
        self._log_call(req, response, started, stream=True)
        return response

    # -- internals -----------------------------------------------------

    def _gate(self, req: ChatRequest) -> None:
        if req.has_images() and not self.endpoint.image_capable:
            raise CapabilityError(
                f"endpoint {self.endpoint.id!r} is not image-capable but the request carries image parts"
            )

    def _chat_url(self) -> str:
        return self.endpoint.base_url.rstrip("/") + "/chat/completions"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.auth_env:
            token = os.environ.get(self.endpoint.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post_with_retries(self, payload: dict) -> tuple[dict, int]:
        attempts = self.endpoint.max_retries + 1
        last: Optional[Exception] = None
        for attempt in range(attempts):
            try:
                return self._transport.post(self._chat_url(), payload, self._headers(), self.endpoint.request_timeout), attempt
            except TransientChatError as exc:
                last = exc
                if attempt + 1 < attempts:
                    time.sleep(self._backoff_base * (2**attempt))
        raise TransientExhaustedError(f"gave up after {attempts} attempts: {last}") from last

    @staticmethod
    def _parse_response(body: dict, retries: int) -> ChatResponse:
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            finish = choice.get("finish_reason") or "stop"
        except (KeyError, IndexError, TypeError) as exc:
            raise PermanentChatError(f"malformed completion response: {exc}") from exc
        return ChatResponse(text=text, finish_reason=finish, usage=body.get("usage", {}), retry_count=retries)

    def _log_call(self, req: ChatRequest, response: ChatResponse, started: float, stream: bool) -> None:
        if not self._log_path:
            return
        record = {
            "ts": time.time(),
            "endpoint_id": self.endpoint.id,
            "model": self.endpoint.model_name,
            "stream": stream,
            "latency_ms": round((time.monotonic() - started) * 1000, 3),
            "retry_count": response.retry_count,
            "finish_reason": response.finish_reason,
            "usage": response.usage,
            "user_chars": sum(len(p.text) for p in req.user_parts if isinstance(p, TextPart)),
            "image_parts": sum(1 for p in req.user_parts if isinstance(p, ImagePart)),
        }
        with self._log_lock:
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
