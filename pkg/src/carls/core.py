"""Shared domain types, shard hashing, vector math and binary encodings.

Every float that is stored or sent over the wire is a little-endian IEEE-754
float32. Reductions (norms, dot products, means) accumulate in float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

CHECKPOINT_MAGIC = b"CKPT"


class CarlsError(Exception):
    """Base class for every error raised by this package."""

    code = 8


class MalformedPayload(CarlsError, ValueError):
    code = 1


class VersionMismatch(MalformedPayload):
    code = 2


class UnknownMessageType(MalformedPayload):
    code = 3


class UnknownNamespace(CarlsError, KeyError):
    code = 4

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return Exception.__str__(self)


class DimensionMismatch(CarlsError, ValueError):
    code = 5


class NonFinite(DimensionMismatch):
    code = 6


class MalformedRecord(CarlsError, ValueError):
    code = 7


class ConfigError(CarlsError):
    code = 9


# --------------------------------------------------------------------------
# keys and hashing


@dataclass(frozen=True, order=True)
class KnowledgeKey:
    namespace: str
    id: bytes

    def __post_init__(self) -> None:
        if isinstance(self.id, str):
            object.__setattr__(self, "id", self.id.encode())
        if not self.id:
            raise ValueError("KnowledgeKey id must be non-empty")

    @property
    def hash_bytes(self) -> bytes:
        return self.namespace.encode() + b"\x00" + self.id

    def __repr__(self) -> str:
        try:
            ident = self.id.decode()
        except UnicodeDecodeError:
            ident = self.id.hex()
        return f"{self.namespace}/{ident}"


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def shard_of(key: KnowledgeKey, num_shards: int) -> int:
    """Shard index of ``key``: FNV-1a 64 of ``namespace 0x00 id`` modulo ``num_shards``."""
    if num_shards < 1:
        raise ValueError("num_shards must be >= 1")
    return fnv1a64(key.hash_bytes) % num_shards


# --------------------------------------------------------------------------
# vectors


def as_vector(values, dim: Optional[int] = None) -> np.ndarray:
    """Validate and coerce ``values`` to a 1-D float32 array.

    Raises DimensionMismatch on a wrong shape and NonFinite on NaN/Inf.
    """
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionMismatch(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise NonFinite("vector contains NaN or Inf")
    return v


def _dot_rows(m: np.ndarray, q: np.ndarray) -> np.ndarray:
    # elementwise product + row sum keeps per-row results independent of row count
    return np.sum(m * q, axis=-1)


def cosine_rows(m: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cosine similarity of every row of ``m`` against ``q`` (zero norm -> 0)."""
    m = np.asarray(m, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if m.shape[-1] != q.shape[-1]:
        raise DimensionMismatch(f"dims differ: {m.shape[-1]} vs {q.shape[-1]}")
    dots = _dot_rows(m, q)
    denom = np.sqrt(_dot_rows(m, m)) * math.sqrt(float(np.sum(q * q)))
    out = np.zeros_like(dots)
    ok = denom > 0
    out[ok] = dots[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def l2sq_rows(m: np.ndarray, q: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if m.shape[-1] != q.shape[-1]:
        raise DimensionMismatch(f"dims differ: {m.shape[-1]} vs {q.shape[-1]}")
    d = m - q
    return _dot_rows(d, d)


def cosine(a, b) -> float:
    a = np.asarray(a)
    if a.shape != np.shape(b):
        raise DimensionMismatch(f"dims differ: {a.shape} vs {np.shape(b)}")
    return float(cosine_rows(a[None, :], b)[0])


def l2sq(a, b) -> float:
    a = np.asarray(a)
    if a.shape != np.shape(b):
        raise DimensionMismatch(f"dims differ: {a.shape} vs {np.shape(b)}")
    return float(l2sq_rows(a[None, :], b)[0])


# --------------------------------------------------------------------------
# records


@dataclass
class EmbeddingEntry:
    vector: np.ndarray
    version: int = 0
    ltime: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingEntry):
            return NotImplemented
        return (
            self.version == other.version
            and self.ltime == other.ltime
            and self.vector.tobytes() == other.vector.tobytes()
        )


@dataclass
class FeatureRecord:
    neighbors: List[Tuple[KnowledgeKey, float]] = field(default_factory=list)
    label_dist: Optional[np.ndarray] = None
    raw_features: Optional[np.ndarray] = None
    provenance: str = ""

    def validate(self) -> "FeatureRecord":
        """Check weights and label distribution; returns self for chaining."""
        for key, w in self.neighbors:
            if not isinstance(key, KnowledgeKey):
                raise MalformedRecord(f"neighbor {key!r} is not a KnowledgeKey")
            if not math.isfinite(w) or w < 0:
                raise MalformedRecord(f"neighbor weight {w} must be finite and >= 0")
        if self.label_dist is not None:
            try:
                dist = as_vector(self.label_dist)
            except CarlsError as exc:
                raise MalformedRecord(str(exc)) from None
            if np.any(dist < 0) or abs(float(np.sum(dist, dtype=np.float64)) - 1.0) > 1e-6:
                raise MalformedRecord("label_dist must be a probability vector")
            self.label_dist = dist
        if self.raw_features is not None:
            try:
                self.raw_features = as_vector(self.raw_features)
            except CarlsError as exc:
                raise MalformedRecord(str(exc)) from None
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureRecord):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.asarray(a, np.float32).tobytes() == np.asarray(b, np.float32).tobytes()

        return (
            [(k, np.float32(w)) for k, w in self.neighbors]
            == [(k, np.float32(w)) for k, w in other.neighbors]
            and same(self.label_dist, other.label_dist)
            and same(self.raw_features, other.raw_features)
            and self.provenance == other.provenance
        )


@dataclass
class GradientDelta:
    delta: np.ndarray
    source: str
    ltime: int
    wall: float = 0.0  # monotonic arrival time, used by the wall-clock expiry loop


@dataclass
class Checkpoint:
    step: int
    params: Dict[str, np.ndarray]
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, m in self.params.items():
            m = np.asarray(m, dtype=np.float32)
            if m.ndim != 2:
                raise MalformedPayload(f"param {name} must be a matrix, got shape {m.shape}")
            if not np.all(np.isfinite(m)):
                raise NonFinite(f"param {name} is not finite")
            self.params[name] = m

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.step == other.step
            and self.metadata == other.metadata
            and list(self.params) == list(other.params)
            and all(
                self.params[k].shape == other.params[k].shape
                and self.params[k].tobytes() == other.params[k].tobytes()
                for k in self.params
            )
        )


# --------------------------------------------------------------------------
# binary encoding


class Writer:
    """Little-endian append-only byte builder."""

    def __init__(self) -> None:
        self._parts: List[bytes] = []

    def u8(self, x: int) -> "Writer":
        self._parts.append(struct.pack("<B", x))
        return self

    def u16(self, x: int) -> "Writer":
        self._parts.append(struct.pack("<H", x))
        return self

    def u32(self, x: int) -> "Writer":
        self._parts.append(struct.pack("<I", x))
        return self

    def u64(self, x: int) -> "Writer":
        self._parts.append(struct.pack("<Q", x))
        return self

    def f32(self, x: float) -> "Writer":
        self._parts.append(struct.pack("<f", x))
        return self

    def raw(self, b: bytes) -> "Writer":
        self._parts.append(bytes(b))
        return self

    def str16(self, s) -> "Writer":
        b = s.encode() if isinstance(s, str) else bytes(s)
        if len(b) > 0xFFFF:
            raise MalformedPayload("string longer than 65535 bytes")
        return self.u16(len(b)).raw(b)

    def vector(self, v) -> "Writer":
        v = np.asarray(v, dtype="<f4")
        return self.u32(v.shape[0]).raw(v.tobytes())

    def key(self, k: KnowledgeKey) -> "Writer":
        return self.str16(k.namespace).str16(k.id)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    """Bounds-checked little-endian cursor; every failure is MalformedPayload."""

    def __init__(self, data: bytes, offset: int = 0) -> None:
        self.data = memoryview(bytes(data))
        self.pos = offset

    def _take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedPayload(
                f"truncated input: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f32(self) -> float:
        x = struct.unpack("<f", self._take(4))[0]
        if not math.isfinite(x):
            raise MalformedPayload("non-finite float")
        return x

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def str16(self) -> str:
        try:
            return self.raw(self.u16()).decode()
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"invalid utf-8 string: {exc}") from None

    def bytes16(self) -> bytes:
        return self.raw(self.u16())

    def vector(self) -> np.ndarray:
        dim = self.u32()
        if dim * 4 > len(self.data) - self.pos:
            raise MalformedPayload(f"truncated vector: dim {dim}")
        v = np.frombuffer(self._take(4 * dim), dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(v)):
            raise MalformedPayload("vector contains non-finite values")
        return v

    def key(self) -> KnowledgeKey:
        ns = self.str16()
        ident = self.bytes16()
        if not ident:
            raise MalformedPayload("empty key id")
        return KnowledgeKey(ns, ident)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self) -> None:
        if self.remaining:
            raise MalformedPayload(f"{self.remaining} trailing bytes")


def encode_vector(v) -> bytes:
    """``u32 dim`` followed by ``dim`` float32 values, little-endian."""
    return Writer().vector(as_vector(v)).getvalue()


def decode_vector(data: bytes) -> np.ndarray:
    r = Reader(data)
    v = r.vector()
    r.expect_end()
    return v


def write_entry(w: Writer, e: EmbeddingEntry) -> Writer:
    return w.vector(e.vector).u64(e.version).u64(e.ltime)


def read_entry(r: Reader) -> EmbeddingEntry:
    v = r.vector()
    return EmbeddingEntry(v, r.u64(), r.u64())


def encode_entry(e: EmbeddingEntry) -> bytes:
    return write_entry(Writer(), e).getvalue()


def decode_entry(data: bytes) -> EmbeddingEntry:
    r = Reader(data)
    e = read_entry(r)
    r.expect_end()
    return e


def write_record(w: Writer, rec: FeatureRecord) -> Writer:
    w.u32(len(rec.neighbors))
    for k, weight in rec.neighbors:
        w.key(k).f32(weight)
    for opt in (rec.label_dist, rec.raw_features):
        if opt is None:
            w.u8(0)
        else:
            w.u8(1).vector(opt)
    return w.str16(rec.provenance)


def read_record(r: Reader) -> FeatureRecord:
    n = r.u32()
    if n * 9 > r.remaining:
        raise MalformedPayload(f"truncated neighbor list of length {n}")
    neighbors = [(r.key(), r.f32()) for _ in range(n)]
    opts = []
    for _ in range(2):
        flag = r.u8()
        if flag not in (0, 1):
            raise MalformedPayload(f"bad optional flag {flag}")
        opts.append(r.vector() if flag else None)
    rec = FeatureRecord(neighbors, opts[0], opts[1], r.str16())
    try:
        return rec.validate()
    except MalformedRecord as exc:
        raise MalformedPayload(str(exc)) from None


def encode_record(rec: FeatureRecord) -> bytes:
    return write_record(Writer(), rec.validate()).getvalue()


def decode_record(data: bytes) -> FeatureRecord:
    r = Reader(data)
    rec = read_record(r)
    r.expect_end()
    return rec


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Checkpoint file body; metadata travels in an optional trailer."""
    w = Writer().raw(CHECKPOINT_MAGIC).u64(ckpt.step).u32(len(ckpt.params))
    for name, m in ckpt.params.items():
        rows, cols = m.shape
        w.str16(name).u32(rows).u32(cols).raw(np.ascontiguousarray(m, dtype="<f4").tobytes())
    if ckpt.metadata:
        w.u32(len(ckpt.metadata))
        for k, v in ckpt.metadata.items():
            w.str16(k).str16(v)
    return w.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = Reader(data)
    if r.raw(4) != CHECKPOINT_MAGIC:
        raise MalformedPayload("bad checkpoint magic")
    step = r.u64()
    params: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.str16()
        rows, cols = r.u32(), r.u32()
        m = np.frombuffer(r.raw(4 * rows * cols), dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(m)):
            raise MalformedPayload(f"param {name} is not finite")
        params[name] = m.reshape(rows, cols)
    metadata: Dict[str, str] = {}
    if r.remaining:
        for _ in range(r.u32()):
            k = r.str16()
            metadata[k] = r.str16()
    r.expect_end()
    return Checkpoint(step, params, metadata)


def one_hot(index: int, num_classes: int) -> np.ndarray:
    v = np.zeros(num_classes, dtype=np.float32)
    v[index] = 1.0
    return v


def keys_for(namespace: str, ids: Sequence) -> List[KnowledgeKey]:
    return [KnowledgeKey(namespace, i) for i in ids]
