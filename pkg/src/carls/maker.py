"""Knowledge makers: poll trainer checkpoints, recompute knowledge, write it to the bank."""

from __future__ import annotations

import base64
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .core import (
    Checkpoint,
    CarlsError,
    ConfigError,
    FeatureRecord,
    KnowledgeKey,
    decode_checkpoint,
    decode_vector,
    encode_vector,
    one_hot,
)
from .trainer import GRAPH, LABELED_EMB, LABELS, NODE_EMB, classify, encode, tower

log = logging.getLogger(__name__)

CKPT_RE = re.compile(r"^ckpt-(\d+)\.ckb$")

# encoder name -> (checkpoint parameter, forward function)
ENCODERS: Dict[str, tuple] = {
    "node": ("W", encode),
    "image": ("A", tower),
    "text": ("B", tower),
}

TASKS = ("embed_refresh", "label_mine", "graph_agree", "graph_build")


@dataclass
class Item:
    key: str
    features: Optional[np.ndarray] = None
    label: Optional[int] = None


def read_items(path) -> List[Item]:
    """Parse ``key TAB base64(vector) [TAB label]`` lines."""
    items = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise ConfigError(f"{path}:{lineno}: expected key<TAB>features[<TAB>label]")
        vec = decode_vector(base64.b64decode(parts[1])) if parts[1] else None
        label = int(parts[2]) if len(parts) > 2 and parts[2] != "" else None
        items.append(Item(parts[0], vec, label))
    return items


def write_items(path, items: Iterable[Item]) -> None:
    lines = []
    for it in items:
        feat = base64.b64encode(encode_vector(it.features)).decode() if it.features is not None else ""
        row = [it.key, feat] + ([str(it.label)] if it.label is not None else [])
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def poll_checkpoint(directory) -> Optional[Checkpoint]:
    """Latest complete, decodable ``ckpt-<step>.ckb`` in ``directory`` (``.tmp`` files are ignored)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"checkpoint directory {directory} does not exist")
    found = []
    for p in directory.iterdir():
        m = CKPT_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    for step, path in sorted(found, reverse=True):
        try:
            return decode_checkpoint(path.read_bytes())
        except (CarlsError, OSError) as exc:
            log.warning("skipping unreadable checkpoint %s: %s", path, exc)
    return None


def _param(ckpt: Checkpoint, name: str) -> np.ndarray:
    try:
        return ckpt.params[name].astype(np.float64)
    except KeyError:
        raise ConfigError(f"checkpoint step {ckpt.step} has no parameter {name!r}") from None


# --------------------------------------------------------------------------
# tasks


def embed_refresh(bank, ckpt: Checkpoint, items: Sequence[Item], namespace: str = NODE_EMB, encoder: str = "node") -> int:
    param, fn = ENCODERS[encoder]
    M = _param(ckpt, param)
    if not items:
        return 0
    embs = fn(M, np.stack([it.features for it in items]))
    bank.set_embeddings([(KnowledgeKey(namespace, it.key), e, ckpt.step) for it, e in zip(items, embs)])
    return len(items)


def label_mine(bank, ckpt: Checkpoint, items: Sequence[Item], tau: float, namespace: str = LABELS) -> int:
    """Overwrite a label with one-hot(argmax p) when max p >= tau; returns labels written."""
    if not 0 < tau < 1:
        raise ConfigError("tau must be in (0, 1)")
    W, V = _param(ckpt, "W"), _param(ckpt, "V")
    if not items:
        return 0
    probs = classify(V, encode(W, np.stack([it.features for it in items])))
    keys = [KnowledgeKey(namespace, it.key) for it in items]
    confident = [(k, p) for k, p in zip(keys, probs) if p.max() >= tau]
    if not confident:
        return 0
    existing = dict(zip([k for k, _ in confident], bank.lookup_features([k for k, _ in confident])))
    writes = []
    for k, p in confident:
        old = existing[k] or FeatureRecord()
        rec = FeatureRecord(old.neighbors, one_hot(int(np.argmax(p)), len(p)), old.raw_features, "mined")
        writes.append((k, rec))
    bank.set_features_many(writes)
    return len(writes)


def graph_agree(
    bank,
    unlabeled: Sequence[str],
    k: int,
    num_classes: int,
    metric: str = "cosine",
    query_ns: str = NODE_EMB,
    labeled_ns: str = LABELED_EMB,
    label_ns: str = LABELS,
) -> int:
    """Infer labels for ``unlabeled`` keys from their k nearest labeled embeddings.

    Neighbor weights are ``max(score, 0)``; the written distribution is the
    weight-normalized sum of neighbor one-hot labels.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    entries = bank.lookup_embeddings([KnowledgeKey(query_ns, u) for u in unlabeled], create=False)
    writes = []
    label_cache: Dict[bytes, Optional[int]] = {}
    for u, e in zip(unlabeled, entries):
        if e is None:
            continue
        hits = bank.knn_search(labeled_ns, e.vector, k, metric).hits
        missing = [h.id for h, _ in hits if h.id not in label_cache]
        if missing:
            for ident, rec in zip(missing, bank.lookup_features([KnowledgeKey(label_ns, i) for i in missing])):
                label_cache[ident] = None if rec is None or rec.label_dist is None else int(np.argmax(rec.label_dist))
        dist = np.zeros(num_classes, np.float64)
        for hk, score in hits:
            label = label_cache[hk.id]
            if label is not None and score > 0:
                dist[label] += score
        total = dist.sum()
        if total <= 0:
            continue
        dist = (dist / total).astype(np.float32)
        dist[np.argmax(dist)] += np.float32(1.0) - dist.sum(dtype=np.float32)
        writes.append((KnowledgeKey(label_ns, u), FeatureRecord(label_dist=dist, provenance="inferred")))
    bank.set_features_many(writes)
    return len(writes)


def graph_build(
    bank,
    keys: Sequence[str],
    k: int,
    sigma_min: float,
    emb_ns: str = NODE_EMB,
    graph_ns: str = GRAPH,
    symmetric: bool = False,
) -> int:
    """Rebuild neighbor lists as the top-k cosine neighbors (self excluded) with score >= sigma_min."""
    entries = bank.lookup_embeddings([KnowledgeKey(emb_ns, key) for key in keys], create=False)
    graph: Dict[str, Dict[KnowledgeKey, float]] = {}
    for key, e in zip(keys, entries):
        if e is None:
            continue
        me = KnowledgeKey(emb_ns, key)
        hits = [(h, s) for h, s in bank.knn_search(emb_ns, e.vector, k + 1, "cosine").hits if h != me][:k]
        graph[key] = {h: float(s) for h, s in hits if s >= sigma_min}
    if symmetric:
        for key, nbrs in list(graph.items()):
            for h, s in nbrs.items():
                other = h.id.decode()
                if other in graph:
                    graph[other].setdefault(KnowledgeKey(emb_ns, key), s)
    targets = [KnowledgeKey(graph_ns, key) for key in graph]
    old = bank.lookup_features(targets) if targets else []
    writes = []
    for t, prev, key in zip(targets, old, graph):
        prev = prev or FeatureRecord()
        neighbors = sorted(graph[key].items(), key=lambda kv: (-kv[1], kv[0].id))
        writes.append((t, FeatureRecord(neighbors, prev.label_dist, prev.raw_features, prev.provenance)))
    bank.set_features_many(writes)
    return len(writes)


# --------------------------------------------------------------------------
# long-running worker


@dataclass
class MakerConfig:
    checkpoint_dir: Path
    task: str = "embed_refresh"
    poll_interval: float = 1.0
    batch_size: int = 64
    tau: float = 0.9
    k: int = 5
    sigma_min: float = 0.0
    metric: str = "cosine"
    num_classes: int = 2
    encoder: str = "node"
    namespace: Optional[str] = None
    seed: int = 0
    min_step: int = 0  # checkpoints below this step are not used
    max_passes: Optional[int] = None
    backoff_base: float = 0.05
    backoff_cap: float = 30.0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.poll_interval <= 0 or self.batch_size < 1:
            raise ConfigError("poll_interval must be > 0 and batch_size >= 1")
        self.checkpoint_dir = Path(self.checkpoint_dir)


@dataclass
class MakerState:
    loaded_step: Optional[int] = None
    items_processed: int = 0
    passes: int = 0
    last_error: Optional[str] = None


class Maker:
    """Processes ``items`` in batches with the latest checkpoint.

    A pass over all items is completed per checkpoint; when a newer checkpoint
    appears mid-pass it is used from the next batch on, and the pass is
    extended so that every item is eventually written with it. With no newer
    checkpoint the maker idles.
    """

    def __init__(
        self,
        config: MakerConfig,
        bank,
        items: Sequence[Item],
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.bank = bank
        self.items = list(items)
        self.state = MakerState()
        self.checkpoint: Optional[Checkpoint] = None
        self._sleep = sleep
        self._cursor = 0
        self._remaining = 0  # items left before the current checkpoint is fully applied
        self._failures = 0

    def poll(self) -> bool:
        ckpt = poll_checkpoint(self.config.checkpoint_dir)
        if ckpt is None or ckpt.step < self.config.min_step:
            return False
        loaded = self.state.loaded_step
        if loaded is not None and ckpt.step <= loaded:
            if ckpt.step < loaded:
                log.warning("ignoring checkpoint step %d older than loaded step %d", ckpt.step, loaded)
            return False
        self.checkpoint = ckpt
        self.state.loaded_step = ckpt.step
        self._remaining = len(self.items)
        log.debug("loaded checkpoint step %d", ckpt.step)
        return True

    @property
    def idle(self) -> bool:
        return self.checkpoint is None or self._remaining == 0

    def _process(self, batch: List[Item]) -> None:
        cfg, bank, ckpt = self.config, self.bank, self.checkpoint
        if cfg.task == "embed_refresh":
            embed_refresh(bank, ckpt, batch, cfg.namespace or NODE_EMB, cfg.encoder)
        elif cfg.task == "label_mine":
            label_mine(bank, ckpt, batch, cfg.tau, cfg.namespace or LABELS)
        elif cfg.task == "graph_agree":
            graph_agree(bank, [it.key for it in batch], cfg.k, cfg.num_classes, cfg.metric)
        else:
            graph_build(bank, [it.key for it in batch], cfg.k, cfg.sigma_min, cfg.namespace or NODE_EMB)

    def step(self) -> int:
        """Poll, then process at most one batch. Returns the number of items written."""
        self.poll()
        if self.idle or not self.items:
            return 0
        n = min(self.config.batch_size, self._remaining)
        batch = [self.items[(self._cursor + i) % len(self.items)] for i in range(n)]
        try:
            self._process(batch)
        except (TimeoutError, ConnectionError) as exc:
            self.state.last_error = str(exc)
            delay = min(self.config.backoff_cap, self.config.backoff_base * 2**self._failures)
            self._failures += 1
            log.warning("bank unavailable (%s); retrying batch in %.2fs", exc, delay)
            self._sleep(delay)
            return 0
        self._failures = 0
        self._cursor = (self._cursor + n) % len(self.items)
        self._remaining -= n
        self.state.items_processed += n
        if self._remaining == 0:
            self.state.passes += 1
        return n

    def run_until_idle(self) -> int:
        """Process batches until every item reflects the newest checkpoint."""
        total = 0
        while True:
            total += self.step()
            if self.idle:
                return total

    def run(self, shutdown: Optional[threading.Event] = None) -> MakerState:
        shutdown = shutdown or threading.Event()
        while not shutdown.is_set():
            if self.config.max_passes is not None and self.state.passes >= self.config.max_passes:
                break
            self.step()
            if self.idle:
                shutdown.wait(self.config.poll_interval)
        return self.state
