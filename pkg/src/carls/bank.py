"""Sharded in-memory knowledge bank.

Serves feature records, embeddings with lazy gradient aggregation, and exact
k-nearest-neighbor search. Each shard owns a logical clock; every mutation
(set, enqueue, flush, create, tick) advances it by one.
"""

from __future__ import annotations

import heapq
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    EmbeddingEntry,
    FeatureRecord,
    GradientDelta,
    KnowledgeKey,
    MalformedPayload,
    MalformedRecord,
    NonFinite,
    Reader,
    UnknownNamespace,
    Writer,
    as_vector,
    cosine_rows,
    fnv1a64,
    l2sq_rows,
    read_entry,
    read_record,
    shard_of,
    write_entry,
    write_record,
)

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"CKB1"
NEVER = 2**64 - 1


class Kind(str, Enum):
    FEATURES = "features"
    EMBEDDINGS = "embeddings"


class Metric(str, Enum):
    COSINE = "cosine"
    NEG_L2 = "neg_l2"


@dataclass(frozen=True)
class NamespaceConfig:
    name: str
    kind: Kind = Kind.EMBEDDINGS
    dim: int = 0
    init: str = "zeros"  # "zeros" or "uniform"
    init_scale: float = 0.0
    flush_expiry_ticks: int = NEVER
    outlier_factor: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        # stored as float32 in snapshots; keep the in-memory value identical
        object.__setattr__(self, "init_scale", float(np.float32(self.init_scale)))
        object.__setattr__(self, "outlier_factor", float(np.float32(self.outlier_factor)))
        if self.kind is Kind.EMBEDDINGS and self.dim <= 0:
            raise ValueError(f"namespace {self.name}: embeddings need dim > 0")
        if self.init not in ("zeros", "uniform"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.flush_expiry_ticks < 0 or self.outlier_factor <= 0:
            raise ValueError("flush_expiry_ticks must be >= 0 and outlier_factor > 0")

    def default_vector(self, key: KnowledgeKey) -> np.ndarray:
        if self.init == "zeros" or self.init_scale == 0:
            return np.zeros(self.dim, dtype=np.float32)
        rng = np.random.default_rng([self.seed, fnv1a64(key.hash_bytes)])
        s = self.init_scale
        return rng.uniform(-s, s, self.dim).astype(np.float32)


@dataclass
class KnnResult:
    hits: List[Tuple[KnowledgeKey, float]]

    @property
    def keys(self) -> List[KnowledgeKey]:
        return [k for k, _ in self.hits]


@dataclass
class ShardStats:
    index: int
    entries: int = 0
    features: int = 0
    pending_keys: int = 0
    clock: int = 0
    bytes: int = 0


def _rank(hit: Tuple[KnowledgeKey, float]):
    return (-hit[1], hit[0].id)


class Shard:
    """One partition of the bank. All methods assume the caller holds ``lock``."""

    def __init__(self, index: int) -> None:
        self.index = index
        self.embeddings: Dict[KnowledgeKey, EmbeddingEntry] = {}
        self.features: Dict[KnowledgeKey, FeatureRecord] = {}
        self.pending: Dict[KnowledgeKey, List[GradientDelta]] = {}
        self.clock = 0
        self.bytes = 0
        self.lock = threading.RLock()

    def tick(self) -> int:
        t = self.clock
        self.clock += 1
        return t

    def get_or_create(self, key: KnowledgeKey, cfg: NamespaceConfig) -> EmbeddingEntry:
        e = self.embeddings.get(key)
        if e is None:
            e = EmbeddingEntry(cfg.default_vector(key), 0, self.tick())
            self.embeddings[key] = e
            self.bytes += 4 * cfg.dim + 16
        return e

    def flush(self, key: KnowledgeKey, cfg: NamespaceConfig) -> Optional[np.ndarray]:
        deltas = self.pending.pop(key, None)
        if not deltas:
            return None
        entry = self.get_or_create(key, cfg)
        d = np.stack([g.delta for g in deltas]).astype(np.float64)
        if len(deltas) >= 3:
            norms = np.sqrt(np.sum(d * d, axis=1))
            m = float(np.median(norms))
            if m > 0:
                d = d[norms <= cfg.outlier_factor * m]
        if len(d) == 0:
            entry.ltime = self.tick()
            return None
        applied = d.mean(axis=0)
        entry.vector = (entry.vector.astype(np.float64) - applied).astype(np.float32)
        entry.ltime = self.tick()
        return applied


class KnowledgeBank:
    """In-process sharded bank.

    ``knn_flush`` selects whether kNN scans flush pending gradients of scanned
    keys first (deterministic mode) or read stored values as-is.
    """

    def __init__(
        self,
        namespaces: Iterable[NamespaceConfig],
        num_shards: int = 1,
        knn_flush: bool = True,
    ) -> None:
        if num_shards < 1:
            raise ValueError("num_shards must be >= 1")
        self.namespaces: Dict[str, NamespaceConfig] = {c.name: c for c in namespaces}
        self.num_shards = num_shards
        self.knn_flush = knn_flush
        self.shards = [Shard(i) for i in range(num_shards)]

    # ---- helpers

    def _cfg(self, namespace: str, kind: Kind) -> NamespaceConfig:
        cfg = self.namespaces.get(namespace)
        if cfg is None:
            raise UnknownNamespace(f"unknown namespace {namespace!r}")
        if cfg.kind is not kind:
            raise UnknownNamespace(f"namespace {namespace!r} holds {cfg.kind.value}, not {kind.value}")
        return cfg

    def shard_for(self, key: KnowledgeKey) -> Shard:
        return self.shards[shard_of(key, self.num_shards)]

    # ---- embeddings

    def set_embedding(self, key: KnowledgeKey, vector, version: int = 0) -> None:
        cfg = self._cfg(key.namespace, Kind.EMBEDDINGS)
        v = as_vector(vector, cfg.dim).copy()
        shard = self.shard_for(key)
        with shard.lock:
            old = shard.embeddings.get(key)
            if old is None:
                shard.bytes += 4 * cfg.dim + 16
                version_out = version
            else:
                version_out = max(old.version, version)
            shard.pending.pop(key, None)
            shard.embeddings[key] = EmbeddingEntry(v, version_out, shard.tick())

    def set_embeddings(self, items) -> None:
        for key, vector, version in items:
            self.set_embedding(key, vector, version)

    def lookup_embeddings(
        self, keys: Sequence[KnowledgeKey], create: bool = True
    ) -> List[Optional[EmbeddingEntry]]:
        """Flush then return each key's entry.

        Missing keys are created from the namespace default with version 0,
        or reported as None when ``create`` is False.
        """
        out: List[Optional[EmbeddingEntry]] = []
        for key in keys:
            cfg = self._cfg(key.namespace, Kind.EMBEDDINGS)
            shard = self.shard_for(key)
            with shard.lock:
                if not create and key not in shard.embeddings and key not in shard.pending:
                    out.append(None)
                    continue
                shard.flush(key, cfg)
                e = shard.get_or_create(key, cfg)
                out.append(EmbeddingEntry(e.vector.copy(), e.version, e.ltime))
        return out

    def update_gradient(self, key: KnowledgeKey, gradient, learning_rate: float, source: str = "") -> None:
        cfg = self._cfg(key.namespace, Kind.EMBEDDINGS)
        g = as_vector(gradient, cfg.dim)
        lr = float(np.float32(learning_rate))
        if not lr > 0 or not np.isfinite(lr):
            raise NonFinite(f"learning_rate must be finite and > 0, got {learning_rate}")
        delta = (g.astype(np.float64) * lr).astype(np.float32)
        if not np.all(np.isfinite(delta)):
            raise NonFinite("scaled gradient overflowed")
        shard = self.shard_for(key)
        with shard.lock:
            shard.pending.setdefault(key, []).append(
                GradientDelta(delta, source, shard.tick(), time.monotonic())
            )

    def update_gradients(self, items, source: str = "") -> None:
        for key, gradient, lr in items:
            self.update_gradient(key, gradient, lr, source)

    def flush_key(self, key: KnowledgeKey) -> Optional[np.ndarray]:
        """Apply the outlier-filtered mean of pending deltas; returns it (or None)."""
        cfg = self._cfg(key.namespace, Kind.EMBEDDINGS)
        shard = self.shard_for(key)
        with shard.lock:
            return shard.flush(key, cfg)

    def tick_expiry(self) -> int:
        """Advance every shard clock by one and flush keys whose oldest delta expired."""
        flushed = 0
        for shard in self.shards:
            with shard.lock:
                shard.tick()
                for key in sorted(shard.pending, key=lambda k: (k.namespace, k.id)):
                    cfg = self.namespaces[key.namespace]
                    deltas = shard.pending[key]
                    if shard.clock - deltas[0].ltime >= cfg.flush_expiry_ticks:
                        shard.flush(key, cfg)
                        flushed += 1
        return flushed

    def flush_older_than(self, seconds: float) -> int:
        """Wall-clock expiry used by the networked server."""
        now = time.monotonic()
        flushed = 0
        for shard in self.shards:
            with shard.lock:
                for key in [k for k, d in shard.pending.items() if now - d[0].wall >= seconds]:
                    shard.flush(key, self.namespaces[key.namespace])
                    flushed += 1
        return flushed

    # ---- features

    def set_features(self, key: KnowledgeKey, record: FeatureRecord) -> None:
        self._cfg(key.namespace, Kind.FEATURES)
        if not isinstance(record, FeatureRecord):
            raise MalformedRecord("expected a FeatureRecord")
        record.validate()
        shard = self.shard_for(key)
        with shard.lock:
            if key not in shard.features:
                shard.bytes += 64
            shard.features[key] = record
            shard.tick()

    def set_features_many(self, items) -> None:
        for key, record in items:
            self.set_features(key, record)

    def lookup_features(self, keys: Sequence[KnowledgeKey]) -> List[Optional[FeatureRecord]]:
        out = []
        for key in keys:
            self._cfg(key.namespace, Kind.FEATURES)
            shard = self.shard_for(key)
            with shard.lock:
                out.append(shard.features.get(key))
        return out

    # ---- nearest neighbors

    def knn_search(self, namespace: str, query, k: int, metric: str = "cosine") -> KnnResult:
        cfg = self._cfg(namespace, Kind.EMBEDDINGS)
        if k < 1:
            raise ValueError("k must be >= 1")
        q = as_vector(query, cfg.dim)
        metric = Metric(metric)
        partial: List[Tuple[KnowledgeKey, float]] = []
        for shard in self.shards:
            partial.extend(self._shard_topk(shard, cfg, q, k, metric))
        hits = sorted(partial, key=_rank)[:k]
        return KnnResult(hits)

    def _shard_topk(self, shard: Shard, cfg: NamespaceConfig, q: np.ndarray, k: int, metric: Metric):
        with shard.lock:
            keys = [key for key in shard.embeddings if key.namespace == cfg.name]
            if self.knn_flush:
                for key in [key for key in shard.pending if key.namespace == cfg.name]:
                    shard.flush(key, cfg)
                    if key not in keys:
                        keys.append(key)
            if not keys:
                return []
            mat = np.stack([shard.embeddings[key].vector for key in keys])
        if metric is Metric.COSINE:
            scores = cosine_rows(mat, q)
        else:
            scores = -l2sq_rows(mat, q)
        return heapq.nsmallest(k, zip(keys, scores.tolist()), key=_rank)

    # ---- introspection

    def stats(self) -> List[ShardStats]:
        out = []
        for s in self.shards:
            with s.lock:
                out.append(
                    ShardStats(s.index, len(s.embeddings), len(s.features), len(s.pending), s.clock, s.bytes)
                )
        return out

    def content(self) -> dict:
        """Logical state without clocks, for equality checks across runs."""
        out = {}
        for s in self.shards:
            with s.lock:
                for key, e in s.embeddings.items():
                    out[key] = ("emb", e.vector.tobytes(), e.version)
                for key, rec in s.features.items():
                    out[(key, "feat")] = ("feat", _record_bytes(rec))
                for key, ds in s.pending.items():
                    out[(key, "pending")] = tuple(d.delta.tobytes() for d in ds)
        return out

    # ---- snapshots

    def save(self, directory) -> List[Path]:
        """Write one ``shard-<i>.ckb`` file per shard (atomic rename)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for s in self.shards:
            with s.lock:
                w = Writer().raw(SNAPSHOT_MAGIC).u32(self.num_shards).u32(s.index).u64(s.clock)
                w.u32(len(self.namespaces))
                for c in self.namespaces.values():
                    (
                        w.str16(c.name).str16(c.kind.value).u32(c.dim).str16(c.init)
                        .f32(c.init_scale).u64(c.flush_expiry_ticks).f32(c.outlier_factor).u64(c.seed)
                    )
                w.u32(len(s.embeddings))
                for key, e in s.embeddings.items():
                    write_entry(w.key(key), e)
                w.u32(len(s.features))
                for key, rec in s.features.items():
                    write_record(w.key(key), rec)
                w.u32(len(s.pending))
                for key, ds in s.pending.items():
                    w.key(key).u32(len(ds))
                    for d in ds:
                        w.vector(d.delta).str16(d.source).u64(d.ltime)
                data = w.getvalue()
            path = directory / f"shard-{s.index}.ckb"
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory, knn_flush: bool = True) -> "KnowledgeBank":
        directory = Path(directory)
        files = sorted(directory.glob("shard-*.ckb"))
        if not files:
            raise FileNotFoundError(f"no snapshot files in {directory}")
        bank = None
        for path in files:
            r = Reader(path.read_bytes())
            if r.raw(4) != SNAPSHOT_MAGIC:
                raise MalformedPayload(f"{path}: bad snapshot magic")
            num_shards, index, clock = r.u32(), r.u32(), r.u64()
            configs = []
            for _ in range(r.u32()):
                name, kind, dim, init = r.str16(), r.str16(), r.u32(), r.str16()
                configs.append(NamespaceConfig(name, kind, dim, init, r.f32(), r.u64(), r.f32(), r.u64()))
            if bank is None:
                bank = cls(configs, num_shards, knn_flush)
            s = bank.shards[index]
            s.clock = clock
            for _ in range(r.u32()):
                key = r.key()
                s.embeddings[key] = read_entry(r)
                s.bytes += 4 * s.embeddings[key].vector.shape[0] + 16
            for _ in range(r.u32()):
                key = r.key()
                s.features[key] = read_record(r)
                s.bytes += 64
            for _ in range(r.u32()):
                key = r.key()
                s.pending[key] = [
                    GradientDelta(r.vector(), r.str16(), r.u64(), time.monotonic()) for _ in range(r.u32())
                ]
            r.expect_end()
        return bank


def _record_bytes(rec: FeatureRecord) -> bytes:
    return write_record(Writer(), rec).getvalue()
