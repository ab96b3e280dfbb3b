"""Named-tensor checkpoint container and interchange-format converter.

Container layout (all integers little-endian):

    magic  b"NTC1"
    u32    format version (1)
    u64    header length in bytes
    header UTF-8 JSON {"meta": {...}, "tensors": [{name, dtype, shape,
           offset, nbytes}, ...]} with offsets relative to the payload
    payload, contiguous little-endian tensor data

Supported dtypes are f32, f16 and bf16. bf16 has no numpy dtype, so it is
widened to f32 on load and narrowed (round-to-nearest-even) on save; the
declared storage dtype is kept per tensor so round trips preserve it.

The converter reads and writes the widely used single-file named-tensor
interchange format (u64 JSON-header-length prefix, dtype strings "F32" /
"F16" / "BF16").
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MAGIC = b"NTC1"
FORMAT_VERSION = 1

_NUMPY_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2")}
DTYPES = ("f32", "f16", "bf16")


class CheckpointFormatError(Exception):
    """Container is malformed or uses an unsupported dtype."""


def bf16_to_f32(raw: np.ndarray) -> np.ndarray:
    """Widen raw bf16 (uint16) words to float32."""
    as_u32 = raw.astype(np.uint32) << 16
    return as_u32.view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Narrow float32 to bf16 words with round-to-nearest-even."""
    bits = np.ascontiguousarray(values, dtype="<f4").view(np.uint32)
    rounding_bias = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    rounded = (bits + rounding_bias) >> 16
    # NaN must stay NaN: rounding can overflow the mantissa into infinity,
    # which is fine, but a NaN payload must not round to infinity.
    nan_mask = np.isnan(values)
    rounded = np.where(nan_mask, (bits >> 16) | np.uint32(0x0040), rounded)
    return rounded.astype(np.uint16)


@dataclass
class Checkpoint:
    """Named tensors plus metadata.

    ``tensors`` holds the in-memory arrays (f32 or f16; bf16 is widened to
    f32). ``dtypes`` holds the declared storage dtype per tensor name.
    """

    tensors: dict[str, np.ndarray]
    dtypes: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.tensors.items():
            declared = self.dtypes.setdefault(name, "f32" if arr.dtype == np.float32 else "f16" if arr.dtype == np.float16 else None)
            if declared not in DTYPES:
                raise CheckpointFormatError(f"tensor {name!r}: unsupported dtype {declared!r}")
            expected_memory = np.float32 if declared in ("f32", "bf16") else np.float16
            if arr.dtype != expected_memory:
                raise CheckpointFormatError(
                    f"tensor {name!r}: declared {declared} must be held as {expected_memory.__name__}, got {arr.dtype}"
                )
        self.meta.setdefault("param_count", int(sum(arr.size for arr in self.tensors.values())))

    @property
    def source_id(self) -> str:
        return str(self.meta.get("source_id", ""))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(arr.shape) for name, arr in self.tensors.items()}


@dataclass
class Residual:
    """Elementwise difference between an instruction-tuned model and its
    base; same tensor structure as a checkpoint."""

    tensors: dict[str, np.ndarray]
    dtypes: dict[str, str]
    provenance: dict = field(default_factory=dict)

    def as_checkpoint(self) -> Checkpoint:
        meta = {"source_id": "residual", **{f"residual_{k}": v for k, v in self.provenance.items()}}
        return Checkpoint(tensors=dict(self.tensors), dtypes=dict(self.dtypes), meta=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Residual":
        provenance = {
            "instruct_id": ckpt.meta.get("residual_instruct_id", ""),
            "base_id": ckpt.meta.get("residual_base_id", ""),
        }
        return cls(tensors=dict(ckpt.tensors), dtypes=dict(ckpt.dtypes), provenance=provenance)


def _memory_array(declared: str, raw: bytes, shape: tuple[int, ...]) -> np.ndarray:
    if declared == "bf16":
        words = np.frombuffer(raw, dtype="<u2")
        arr = bf16_to_f32(words)
    else:
        arr = np.frombuffer(raw, dtype=_NUMPY_DTYPES[declared])
    return arr.reshape(shape).copy()


def _storage_bytes(declared: str, arr: np.ndarray) -> bytes:
    if declared == "bf16":
        return f32_to_bf16(arr).astype("<u2").tobytes()
    return np.ascontiguousarray(arr, dtype=_NUMPY_DTYPES[declared]).tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in ckpt.tensors:
        arr = ckpt.tensors[name]
        declared = ckpt.dtypes[name]
        blob = _storage_bytes(declared, arr)
        entries.append(
            {"name": name, "dtype": declared, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": ckpt.meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise CheckpointFormatError(f"{path}: duplicate tensor {name!r}")
        declared = entry["dtype"]
        if declared not in DTYPES:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has unsupported dtype {declared!r}")
        shape = tuple(entry["shape"])
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointFormatError(f"{path}: tensor {name!r} payload truncated")
        tensors[name] = _memory_array(declared, raw, shape)
        dtypes[name] = declared
    return Checkpoint(tensors=tensors, dtypes=dtypes, meta=header.get("meta", {}))


# -- interchange format ------------------------------------------------------

_INTERCHANGE_DTYPES = {"f32": "F32", "f16": "F16", "bf16": "BF16"}
_INTERCHANGE_REVERSE = {v: k for k, v in _INTERCHANGE_DTYPES.items()}


def export_interchange(ckpt: Checkpoint, path: str) -> None:
    """Write the checkpoint as a single interchange-format file."""
    header: dict = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        declared = ckpt.dtypes[name]
        blob = _storage_bytes(declared, arr)
        header[name] = {
            "dtype": _INTERCHANGE_DTYPES[declared],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)
    if ckpt.meta:
        header["__metadata__"] = {k: str(v) for k, v in sorted(ckpt.meta.items())}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def import_interchange(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    meta = {k: v for k, v in header.pop("__metadata__", {}).items()}
    tensors: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    for name, entry in header.items():
        dtype_tag = entry["dtype"]
        if dtype_tag not in _INTERCHANGE_REVERSE:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype_tag!r}")
        declared = _INTERCHANGE_REVERSE[dtype_tag]
        begin, end = entry["data_offsets"]
        tensors[name] = _memory_array(declared, payload[begin:end], tuple(entry["shape"]))
        dtypes[name] = declared
    return Checkpoint(tensors=tensors, dtypes=dtypes, meta=meta)
