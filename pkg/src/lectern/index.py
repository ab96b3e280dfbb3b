"""Persistent vector knowledge base with exact cosine top-k retrieval.

The corpus is thousands of chunks, so retrieval is a brute-force scan:
exact, trivially correct, and fast at this scale. Vectors are stored as
32-bit floats; similarity is computed with 64-bit accumulation. The index
is immutable once built and safe for concurrent queries.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import Chunk, chunks_version, parse_material_ref
from .embedding import EmbeddingProvider, embed_batch


class VectorIndexError(Exception):
    """Index construction or lookup failure."""


class ZeroNormError(ValueError):
    """Cosine similarity is undefined for a zero-norm vector."""


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a| |b|) in float64, clamped to [-1, 1]."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise ValueError(f"dimension mismatch: {av.shape} vs {bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity undefined for zero-norm vector")
    return float(np.clip(float(av @ bv) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class VectorRecord:
    chunk_id: str
    vector: np.ndarray  # float32
    norm: float  # precomputed L2 norm
    metadata: dict
    empty: bool = False  # zero sentinel for empty-text chunks

    def __post_init__(self):
        actual = float(np.linalg.norm(np.asarray(self.vector, dtype=np.float64)))
        if self.empty:
            return
        if actual == 0.0:
            raise ValueError(f"record {self.chunk_id!r} has zero-norm vector but is not an empty sentinel")
        if abs(actual - self.norm) > 1e-6 * max(actual, 1e-30):
            raise ValueError(f"record {self.chunk_id!r} norm {self.norm} deviates from actual {actual}")

    @classmethod
    def build(cls, chunk_id: str, vector: np.ndarray, metadata: dict) -> "VectorRecord":
        vec = np.asarray(vector, dtype=np.float32)
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        return cls(chunk_id=chunk_id, vector=vec, norm=norm, metadata=metadata, empty=norm == 0.0)


class VectorIndex:
    """Immutable collection of vector records with a scoring cache."""

    def __init__(self, records: Sequence[VectorRecord], dim: int, fingerprint: str, embedder_id: str):
        ids = [r.chunk_id for r in records]
        if len(set(ids)) != len(ids):
            raise VectorIndexError("duplicate chunk_id in index")
        for r in records:
            if r.vector.shape != (dim,):
                raise VectorIndexError(f"record {r.chunk_id!r} has dim {r.vector.shape}, index dim is {dim}")
        self.records = list(records)
        self.dim = dim
        self.fingerprint = fingerprint
        self.embedder_id = embedder_id
        self._by_id = {r.chunk_id: r for r in self.records}
        scorable = [r for r in self.records if not r.empty]
        self._scorable = scorable
        if scorable:
            matrix = np.stack([r.vector for r in scorable]).astype(np.float64)
            norms = np.array([r.norm for r in scorable], dtype=np.float64)
            self._matrix = matrix / norms[:, None]
        else:
            self._matrix = np.zeros((0, dim), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, chunk_id: str) -> Optional[VectorRecord]:
        return self._by_id.get(chunk_id)


def top_k(
    index: VectorIndex,
    query: np.ndarray,
    k: int,
    metadata_filter: Optional[Callable[[dict], bool]] = None,
) -> list[tuple[str, float]]:
    """k best records by cosine score, descending; ties broken by
    ascending chunk_id for a deterministic total order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qv = np.asarray(query, dtype=np.float64)
    if qv.shape != (index.dim,):
        raise ValueError(f"query dim {qv.shape} does not match index dim {index.dim}")
    qnorm = float(np.linalg.norm(qv))
    if qnorm == 0.0:
        raise ZeroNormError("query has zero norm")
    if not index._scorable:
        return []
    scores = index._matrix @ (qv / qnorm)
    np.clip(scores, -1.0, 1.0, out=scores)
    candidates = [
        (record.chunk_id, float(score))
        for record, score in zip(index._scorable, scores)
        if metadata_filter is None or metadata_filter(record.metadata)
    ]
    candidates.sort(key=lambda item: (-item[1], item[0]))
    return candidates[:k]


def chunk_metadata(chunk: Chunk) -> dict:
    course_id, language, material_kind = parse_material_ref(chunk.material_ref)
    meta = {
        "course_id": course_id,
        "kind": material_kind,
        "language": language,
    }
    if chunk.page_number is not None:
        meta["page_number"] = chunk.page_number
    if chunk.image_ref is not None:
        meta["image_ref"] = chunk.image_ref
    return meta


def index_fingerprint(embedder_id: str, store_version: str) -> str:
    return hashlib.sha256(f"{embedder_id}\n{store_version}".encode("utf-8")).hexdigest()[:16]


def build_index(
    chunks: Sequence[Chunk],
    provider: EmbeddingProvider,
    store_version: Optional[str] = None,
    batch_size: int = 64,
) -> VectorIndex:
    """Embed every chunk with non-empty text; empty-text chunks become
    zero sentinels, addressable by id but excluded from scoring."""
    if store_version is None:
        store_version = chunks_version(list(chunks))
    to_embed = [c for c in chunks if c.text.strip()]
    vectors = embed_batch([c.text for c in to_embed], provider, batch_size=batch_size) if to_embed else []
    if vectors:
        dim = int(vectors[0].shape[0])
    else:
        dim = getattr(provider, "dim", 0) or 1
    records = []
    by_id = {c.chunk_id: v for c, v in zip(to_embed, vectors)}
    for chunk in chunks:
        vec = by_id.get(chunk.chunk_id)
        if vec is None:
            vec = np.zeros(dim, dtype=np.float32)
        records.append(VectorRecord.build(chunk.chunk_id, vec, chunk_metadata(chunk)))
    return VectorIndex(
        records,
        dim=dim,
        fingerprint=index_fingerprint(provider.identity, store_version),
        embedder_id=provider.identity,
    )


# -- persistence ------------------------------------------------------------


def save_index(index: VectorIndex, path: str) -> None:
    """Header line {dim, count, fingerprint, embedder_id}, then one JSON
    record per line. Written to a temp file and atomically renamed, so a
    provider crash never leaves a partial index behind."""
    tmp = f"{path}.tmp"
    header = {
        "dim": index.dim,
        "count": len(index.records),
        "fingerprint": index.fingerprint,
        "embedder_id": index.embedder_id,
    }
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in index.records:
            rec = {
                "chunk_id": record.chunk_id,
                "vector": [float(x) for x in record.vector.tolist()],
                "norm": record.norm,
                "metadata": record.metadata,
                "empty": record.empty,
            }
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_index(path: str) -> VectorIndex:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        records = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            records.append(
                VectorRecord(
                    chunk_id=rec["chunk_id"],
                    vector=np.asarray(rec["vector"], dtype=np.float32),
                    norm=rec["norm"],
                    metadata=rec["metadata"],
                    empty=rec.get("empty", False),
                )
            )
    if len(records) != header["count"]:
        raise VectorIndexError(f"index {path} truncated: header says {header['count']}, found {len(records)}")
    return VectorIndex(
        records,
        dim=header["dim"],
        fingerprint=header["fingerprint"],
        embedder_id=header["embedder_id"],
    )
