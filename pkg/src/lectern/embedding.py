"""Embedding providers and batch embedding with retry.

The HTTP provider speaks the common embeddings wire format
(``POST {base_url}/embeddings`` with ``{model, input}``). The stub
provider is a deterministic hashed character-n-gram projection so the
whole pipeline runs offline with stable rankings.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import requests


class EmbeddingError(Exception):
    """Hard embedding failure (e.g. inconsistent dimensions)."""


class TransientEmbeddingError(EmbeddingError):
    """Retryable provider failure."""


class PermanentEmbeddingError(EmbeddingError):
    """Provider gave up; carries the offsets of the failing batch slice."""

    def __init__(self, message: str, batch_offsets: tuple[int, int]):
        super().__init__(message)
        self.batch_offsets = batch_offsets


class EmbeddingProvider(Protocol):
    @property
    def identity(self) -> str: ...

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


class StubEmbedder:
    """Hashed character-n-gram projection, L2-normalized.

    crc32-based hashing keeps vectors identical across processes and
    platforms. Empty or whitespace-only text maps to the zero vector.
    """

    def __init__(self, dim: int = 256, ngram: int = 3):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        self.dim = dim
        self.ngram = ngram

    @property
    def identity(self) -> str:
        return f"stub-ngram{self.ngram}-{self.dim}"

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._one(t) for t in texts]

    def _one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        normalized = " ".join(text.lower().split())
        padded = f" {normalized} "
        for i in range(max(0, len(padded) - self.ngram + 1)):
            gram = padded[i : i + self.ngram]
            h = zlib.crc32(gram.encode("utf-8"))
            sign = 1.0 if (h >> 16) & 1 else -1.0
            vec[h % self.dim] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
        return vec.astype(np.float32)


class HttpEmbeddingProvider:
    """Client for an external embedding endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        auth_token: Optional[str] = None,
        timeout: float = 60.0,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self._auth_token = auth_token
        self._timeout = timeout
        self._session = session or requests.Session()

    @property
    def identity(self) -> str:
        return f"{self.base_url}#{self.model}"

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        headers = {"Content-Type": "application/json"}
        if self._auth_token:
            headers["Authorization"] = f"Bearer {self._auth_token}"
        try:
            resp = self._session.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers=headers,
                timeout=self._timeout,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientEmbeddingError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransientEmbeddingError(f"server error {resp.status_code}")
        if resp.status_code >= 400:
            raise EmbeddingError(f"client error {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        data = body.get("data", [])
        if len(data) != len(texts):
            raise EmbeddingError(f"expected {len(texts)} embeddings, got {len(data)}")
        data = sorted(data, key=lambda d: d.get("index", 0))
        return [np.asarray(d["embedding"], dtype=np.float32) for d in data]


@dataclass
class RetryTelemetry:
    retries: int = 0
    events: list = field(default_factory=list)

    def record(self, offset: int, attempt: int, error: Exception) -> None:
        self.retries += 1
        self.events.append({"offset": offset, "attempt": attempt, "error": str(error)})


def embed_batch(
    texts: Sequence[str],
    provider: EmbeddingProvider,
    max_attempts: int = 3,
    backoff_base: float = 0.25,
    batch_size: int = 64,
    telemetry: Optional[RetryTelemetry] = None,
) -> list[np.ndarray]:
    """Embed texts in order, one vector per text.

    Transient provider failures are retried per slice with exponential
    backoff up to ``max_attempts``; exhaustion raises
    PermanentEmbeddingError carrying the failing slice offsets. Mixed
    dimensionality anywhere in the result is a hard error.
    """
    if not texts:
        raise ValueError("embed_batch needs a non-empty list of texts")
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    vectors: list[np.ndarray] = []
    for offset in range(0, len(texts), batch_size):
        chunk = list(texts[offset : offset + batch_size])
        last: Optional[Exception] = None
        for attempt in range(max_attempts):
            try:
                vectors.extend(provider.embed(chunk))
                break
            except TransientEmbeddingError as exc:
                last = exc
                if telemetry is not None:
                    telemetry.record(offset, attempt, exc)
                if attempt + 1 < max_attempts and backoff_base > 0:
                    time.sleep(backoff_base * (2**attempt))
        else:
            raise PermanentEmbeddingError(
                f"embedding slice [{offset}, {offset + len(chunk)}) failed after {max_attempts} attempts: {last}",
                batch_offsets=(offset, offset + len(chunk)),
            )
    dims = {v.shape[0] for v in vectors}
    if len(dims) > 1:
        raise EmbeddingError(f"inconsistent embedding dimensions in batch: {sorted(dims)}")
    return vectors
