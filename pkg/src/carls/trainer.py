"""Small analytic models, their losses and gradients, and the SGD step loop.

Three model variants share one encoder ``h = tanh(W x)``:

* ``graph_reg``   -- softmax classifier on ``h`` plus a pairwise embedding
  regularizer against neighbor embeddings fetched from the bank.
* ``encoder_gnn`` -- one mean-aggregation graph layer ``z = tanh(U mean(h, h_nbrs))``.
* ``two_tower``   -- linear towers ``a = A x``, ``b = B y`` trained with a
  symmetric InfoNCE loss over in-batch and cached negatives.

Embeddings fetched from the bank are constants here. Gradients with respect
to shared embeddings leave the trainer only through ``update_gradient``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Checkpoint, CarlsError, KnowledgeKey, encode_checkpoint

log = logging.getLogger(__name__)

NODE_EMB = "node_emb"
GRAPH = "graph"
LABELS = "labels"
LABELED_EMB = "labeled_emb"
IMG_EMB = "img_emb"
TXT_EMB = "txt_emb"

VARIANTS = ("graph_reg", "encoder_gnn", "two_tower")
METRIC_FIELDS = ("step", "loss", "accuracy", "stale_skips", "mean_neighbor_version_lag", "regularizer")


@dataclass
class ModelSpec:
    variant: str
    input_dim: int
    hidden_dim: int
    num_classes: int = 2
    temperature: float = 0.1
    lam: float = 0.0
    fresh_fraction: float = 0.5
    text_dim: Optional[int] = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.input_dim, self.hidden_dim, self.num_classes) <= 0:
            raise ValueError("dimensions must be positive")
        if not (self.temperature > 0 and math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("temperature must be > 0 and lambda finite and >= 0")
        if not 0 < self.fresh_fraction <= 1:
            raise ValueError("fresh_fraction must be in (0, 1]")
        if self.text_dim is None:
            self.text_dim = self.input_dim


@dataclass
class Params:
    mats: Dict[str, np.ndarray]
    step: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.mats[name]

    def copy(self) -> "Params":
        return Params({k: v.copy() for k, v in self.mats.items()}, self.step)

    def to_checkpoint(self, metadata=None) -> Checkpoint:
        return Checkpoint(self.step, {k: v.astype(np.float32) for k, v in self.mats.items()}, dict(metadata or {}))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Params":
        return cls({k: v.astype(np.float64) for k, v in ckpt.params.items()}, ckpt.step)


def _f32(m: np.ndarray) -> np.ndarray:
    # parameters stay float32-representable so checkpoints are exact
    return m.astype(np.float32).astype(np.float64)


def init_params(spec: ModelSpec, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    h, d = spec.hidden_dim, spec.input_dim

    def mat(rows, cols):
        return _f32(rng.normal(0.0, 1.0 / math.sqrt(cols), (rows, cols)))

    if spec.variant == "two_tower":
        mats = {"A": mat(h, d), "B": mat(h, spec.text_dim)}
    else:
        mats = {"W": mat(h, d), "V": mat(spec.num_classes, h)}
        if spec.variant == "encoder_gnn":
            mats["U"] = mat(h, h)
    return Params(mats)


# --------------------------------------------------------------------------
# forward pieces shared with the knowledge makers


def encode(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``tanh(W x)`` for a single vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"encoder expects inputs of dim {W.shape[1]}, got {x.shape[-1]}")
    return np.tanh(x @ W.T)


def tower(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != A.shape[1]:
        raise ValueError(f"tower expects inputs of dim {A.shape[1]}, got {x.shape[-1]}")
    return x @ A.T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(V: np.ndarray, h: np.ndarray) -> np.ndarray:
    return softmax(np.asarray(h) @ V.T)


def predict(params: Params, x: np.ndarray) -> np.ndarray:
    """Class posteriors of the plain encoder + classifier path."""
    return classify(params["V"], encode(params["W"], x))


def gnn_predict(params: Params, x: np.ndarray, neighbor_embs: Sequence[np.ndarray]) -> np.ndarray:
    h = encode(params["W"], x)
    m = np.stack([(hi + nb.sum(axis=0)) / (1 + len(nb)) for hi, nb in zip(h, neighbor_embs)])
    return classify(params["V"], np.tanh(m @ params["U"].T))


# --------------------------------------------------------------------------
# losses


@dataclass
class Neighbors:
    """Per-example neighbor lists fetched from the bank (embeddings are constants)."""

    weights: List[np.ndarray]
    embs: List[np.ndarray]
    keys: List[List[KnowledgeKey]] = field(default_factory=list)

    @classmethod
    def empty(cls, n: int, dim: int) -> "Neighbors":
        return cls([np.zeros(0)] * n, [np.zeros((0, dim))] * n, [[] for _ in range(n)])

    @property
    def num_pairs(self) -> int:
        return int(sum(len(w) for w in self.weights))


@dataclass
class LossOutput:
    loss: float
    grads: Dict[str, np.ndarray]
    probs: Optional[np.ndarray] = None
    d_h: Optional[np.ndarray] = None  # d loss / d own embedding, per example
    d_nbr: Optional[List[np.ndarray]] = None  # d loss / d neighbor embedding, per example
    regularizer: float = 0.0


def _cross_entropy(probs, targets, labeled, noise=None):
    """Mean CE over labeled rows and its gradient w.r.t. the logits.

    ``noise`` holds per-row label flip rates ``r``. Rows with ``r > 0`` are
    scored against the noisy-label channel ``q = (1 - r K/(K-1)) p + r/(K-1)``
    (flips uniform over the other classes), so ``p`` models the clean label.
    """
    n = int(labeled.sum())
    d_logits = np.zeros_like(probs)
    if n == 0:
        return 0.0, d_logits
    p = probs[labeled]
    t = targets[labeled]
    r = None if noise is None else np.asarray(noise, np.float64)[labeled]
    if r is None or not np.any(r):
        ce = float(-np.sum(t * np.log(np.clip(p, 1e-300, None))) / n)
        d_logits[labeled] = (p * t.sum(axis=1, keepdims=True) - t) / n
        return ce, d_logits
    k = p.shape[1]
    off = (r / (k - 1))[:, None]
    slope = 1.0 - r[:, None] - off
    q = slope * p + off
    ce = float(-np.sum(t * np.log(np.clip(q, 1e-300, None))) / n)
    g = -t / q * slope  # d ce / d p, per row
    d_logits[labeled] = p * (g - np.sum(p * g, axis=1, keepdims=True)) / n
    return ce, d_logits


def loss_graph_reg(params: Params, x, targets, labeled, nbrs: Neighbors, lam: float, noise=None) -> LossOutput:
    """Cross-entropy plus ``lam * sum_ij w_ij |h_i - h_j|^2 / num_pairs``.

    ``noise`` optionally gives per-row label flip rates (see ``_cross_entropy``).
    """
    W, V = params["W"], params["V"]
    x = np.asarray(x, np.float64)
    labeled = np.asarray(labeled, bool)
    h = encode(W, x)
    probs = classify(V, h)
    ce, d_logits = _cross_entropy(probs, np.asarray(targets, np.float64), labeled, noise)
    d_h = d_logits @ V
    reg = 0.0
    d_nbr = [np.zeros_like(e) for e in nbrs.embs]
    pairs = nbrs.num_pairs
    if lam > 0 and pairs:
        for i, (w, e) in enumerate(zip(nbrs.weights, nbrs.embs)):
            if len(w) == 0:
                continue
            diff = h[i] - e
            reg += float(np.sum(w * np.sum(diff * diff, axis=1)))
            g = (2 * lam / pairs) * w[:, None] * diff
            d_h[i] += g.sum(axis=0)
            d_nbr[i] = -g
        reg /= pairs
    d_pre = d_h * (1 - h * h)
    grads = {"W": d_pre.T @ x, "V": d_logits.T @ h}
    return LossOutput(ce + lam * reg, grads, probs, d_h, d_nbr, reg)


def loss_encoder_gnn(params: Params, x, targets, labeled, nbrs: Neighbors) -> LossOutput:
    """Mean-aggregation over ``{h_i} + neighbors``, then ``tanh(U .)`` and softmax(V .)."""
    W, U, V = params["W"], params["U"], params["V"]
    x = np.asarray(x, np.float64)
    labeled = np.asarray(labeled, bool)
    h = encode(W, x)
    counts = np.array([1 + len(e) for e in nbrs.embs], dtype=np.float64)
    m = np.stack([h[i] + e.sum(axis=0) for i, e in enumerate(nbrs.embs)]) / counts[:, None]
    z = np.tanh(m @ U.T)
    probs = classify(V, z)
    ce, d_logits = _cross_entropy(probs, np.asarray(targets, np.float64), labeled)
    d_z_pre = (d_logits @ V) * (1 - z * z)
    d_m = d_z_pre @ U
    d_h = d_m / counts[:, None]
    d_pre = d_h * (1 - h * h)
    grads = {"W": d_pre.T @ x, "U": d_z_pre.T @ m, "V": d_logits.T @ z}
    return LossOutput(ce, grads, probs, d_h)


def _unit_rows(m: np.ndarray):
    norms = np.sqrt(np.sum(m * m, axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return m / safe[:, None], norms


def _info_nce_side(q, cands, n_var, tau):
    """One direction of InfoNCE for queries ``q`` whose positive is candidate ``i``.

    Returns the summed loss and gradients w.r.t. ``q`` and the first ``n_var``
    candidate rows (the rest are constants).
    """
    qh, qn = _unit_rows(q)
    ch, cn = _unit_rows(cands)
    cos = qh @ ch.T
    cos[qn == 0, :] = 0.0
    cos[:, cn == 0] = 0.0
    s = cos / tau
    p = softmax(s)
    n = len(q)
    idx = np.arange(n)
    loss = float(-np.sum(np.log(np.clip(p[idx, idx], 1e-300, None))))
    d_cos = p.copy()
    d_cos[idx, idx] -= 1.0
    d_cos /= tau
    d_cos[qn == 0, :] = 0.0
    d_cos[:, cn == 0] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        d_q = (d_cos @ ch - np.sum(d_cos * cos, axis=1)[:, None] * qh) / np.where(qn > 0, qn, 1.0)[:, None]
        dc = d_cos[:, :n_var]
        d_c = (dc.T @ qh - np.sum(dc * cos[:, :n_var], axis=0)[:, None] * ch[:n_var]) / np.where(
            cn[:n_var] > 0, cn[:n_var], 1.0
        )[:, None]
    return loss, d_q, d_c


def loss_two_tower(
    params: Params,
    x,
    y,
    n_fresh: int,
    cached_a: np.ndarray,
    cached_b: np.ndarray,
    neg_a: np.ndarray,
    neg_b: np.ndarray,
    tau: float,
) -> LossOutput:
    """Symmetric InfoNCE averaged over the ``n_fresh`` pairs encoded in the trainer.

    ``cached_a``/``cached_b`` hold bank embeddings for batch rows ``n_fresh:``;
    ``neg_a``/``neg_b`` are extra cached negatives. All of them are constants.
    """
    A, B = params["A"], params["B"]
    x = np.asarray(x, np.float64)[:n_fresh]
    y = np.asarray(y, np.float64)[:n_fresh]
    a = tower(A, x)
    b = tower(B, y)
    hdim = A.shape[0]

    def rows(m):
        return np.asarray(m, np.float64).reshape(-1, hdim)

    texts = np.concatenate([b, rows(cached_b), rows(neg_b)])
    images = np.concatenate([a, rows(cached_a), rows(neg_a)])
    l1, d_a1, d_b1 = _info_nce_side(a, texts, n_fresh, tau)
    l2, d_b2, d_a2 = _info_nce_side(b, images, n_fresh, tau)
    scale = 1.0 / (2 * n_fresh)
    d_a = (d_a1 + d_a2) * scale
    d_b = (d_b1 + d_b2) * scale
    grads = {"A": d_a.T @ x, "B": d_b.T @ y}
    loss = (l1 + l2) * scale
    # in-batch retrieval accuracy of the fresh queries, reported as "accuracy"
    sims = _unit_rows(a)[0] @ _unit_rows(texts)[0].T
    acc = float(np.mean(np.argmax(sims, axis=1) == np.arange(n_fresh)))
    return LossOutput(loss, grads, probs=np.array([acc]))


def num_fresh(batch_size: int, fresh_fraction: float) -> int:
    return max(1, min(batch_size, math.ceil(fresh_fraction * batch_size - 1e-9)))


# --------------------------------------------------------------------------
# batches and the step loop


@dataclass
class Batch:
    keys: List[str]
    x: np.ndarray
    targets: Optional[np.ndarray] = None  # soft label rows (classification variants)
    labeled: Optional[np.ndarray] = None
    y_text: Optional[np.ndarray] = None  # paired modality (two_tower)


class BankUnavailable(Exception):
    pass


class Trainer:
    """Runs SGD steps, fetching neighbor / negative embeddings from ``bank``.

    ``bank`` may be a KnowledgeBank, a RemoteBank, or None for bank-free
    baselines. Any Timeout/ConnectionLost while fetching skips the bank-backed
    loss terms for that step and bumps ``stale_skips``.
    """

    def __init__(
        self,
        spec: ModelSpec,
        params: Params,
        bank=None,
        lr: float = 0.1,
        source: str = "trainer-0",
        label_source: str = "data",
        push_gradients: bool = True,
        push_neighbor_grads: bool = False,
        negative_pool: Sequence[str] = (),
        num_negatives: int = 0,
        seed: int = 0,
        embedding_lr: Optional[float] = None,
        label_noise: float = 0.0,
    ) -> None:
        self.spec = spec
        self.params = params
        self.bank = bank
        self.lr = lr
        self.embedding_lr = lr if embedding_lr is None else embedding_lr
        self.source = source
        self.label_source = label_source
        self.label_noise = label_noise
        self.push_gradients = push_gradients
        self.push_neighbor_grads = push_neighbor_grads
        self.negative_pool = list(negative_pool)
        self.num_negatives = num_negatives
        self.rng = np.random.default_rng(seed)
        self.stale_skips = 0
        self.last_negatives: List[str] = []
        self.last_pushed: Dict[KnowledgeKey, np.ndarray] = {}

    @property
    def step(self) -> int:
        return self.params.step

    # ---- bank access

    def _bank_call(self, method: str, *args):
        if self.bank is None:
            raise BankUnavailable("no bank configured")
        try:
            return getattr(self.bank, method)(*args)
        except (TimeoutError, ConnectionError) as exc:
            raise BankUnavailable(str(exc)) from exc

    def fetch_neighbors(self, keys: Sequence[str]) -> Tuple[Neighbors, List[int]]:
        recs = self._bank_call("lookup_features", [KnowledgeKey(GRAPH, k) for k in keys])
        nbr_keys = [[nk for nk, _ in rec.neighbors] if rec else [] for rec in recs]
        weights = [np.array([w for _, w in rec.neighbors], np.float64) if rec else np.zeros(0) for rec in recs]
        unique = sorted({nk for ks in nbr_keys for nk in ks})
        embs: Dict[KnowledgeKey, np.ndarray] = {}
        versions: List[int] = []
        if unique:
            for nk, e in zip(unique, self._bank_call("lookup_embeddings", unique)):
                embs[nk] = e.vector.astype(np.float64)
                versions.append(e.version)
        hdim = self.spec.hidden_dim
        rows = [np.stack([embs[nk] for nk in ks]) if ks else np.zeros((0, hdim)) for ks in nbr_keys]
        return Neighbors(weights, rows, nbr_keys), versions

    def fetch_labels(self, keys: Sequence[str]) -> List[Optional[Tuple[np.ndarray, str]]]:
        """Label distribution and provenance per key, None where the bank has none."""
        recs = self._bank_call("lookup_features", [KnowledgeKey(LABELS, k) for k in keys])
        return [
            None if rec is None or rec.label_dist is None else (rec.label_dist.astype(np.float64), rec.provenance)
            for rec in recs
        ]

    # ---- one step

    def compute(self, batch: Batch) -> Tuple[LossOutput, dict]:
        """Fetch knowledge and evaluate loss + gradients without updating anything."""
        spec = self.spec
        info = {"versions": [], "skipped": False, "negatives": []}
        if spec.variant == "two_tower":
            return self._compute_two_tower(batch, info), info
        targets = batch.targets
        labeled = batch.labeled
        # only labels as originally observed carry the configured flip rate
        noise = np.full(len(batch.keys), self.label_noise) if self.label_noise else None
        if self.label_source == "bank":
            try:
                fetched = self.fetch_labels(batch.keys)
                targets = np.array(targets, np.float64, copy=True)
                labeled = np.array(labeled, bool, copy=True)
                for i, got in enumerate(fetched):
                    if got is not None:
                        targets[i] = got[0]
                        labeled[i] = True
                        if noise is not None and got[1] != "observed":
                            noise[i] = 0.0
            except BankUnavailable:
                info["skipped"] = True
        needs_neighbors = spec.variant == "encoder_gnn" or spec.lam > 0
        nbrs = Neighbors.empty(len(batch.keys), spec.hidden_dim)
        if needs_neighbors:
            try:
                nbrs, info["versions"] = self.fetch_neighbors(batch.keys)
            except BankUnavailable:
                info["skipped"] = True
        if spec.variant == "graph_reg":
            out = loss_graph_reg(self.params, batch.x, targets, labeled, nbrs, spec.lam, noise)
        else:
            out = loss_encoder_gnn(self.params, batch.x, targets, labeled, nbrs)
        info["nbrs"] = nbrs
        info["targets"] = targets
        info["labeled"] = labeled
        return out, info

    def _compute_two_tower(self, batch: Batch, info: dict) -> LossOutput:
        spec = self.spec
        hdim = spec.hidden_dim
        n = len(batch.keys)
        nf = num_fresh(n, spec.fresh_fraction)
        cached_a = cached_b = neg_a = neg_b = np.zeros((0, hdim))
        negatives: List[str] = []
        if self.num_negatives and self.negative_pool:
            in_batch = set(batch.keys)
            pool = [k for k in self.negative_pool if k not in in_batch]
            take = min(self.num_negatives, len(pool))
            negatives = [pool[i] for i in self.rng.choice(len(pool), size=take, replace=False)]
        try:
            stale = list(batch.keys[nf:])
            wanted = stale + negatives
            if wanted:
                ea = self._bank_call("lookup_embeddings", [KnowledgeKey(IMG_EMB, k) for k in wanted])
                eb = self._bank_call("lookup_embeddings", [KnowledgeKey(TXT_EMB, k) for k in wanted])
                va = np.array([e.vector for e in ea], np.float64).reshape(-1, hdim)
                vb = np.array([e.vector for e in eb], np.float64).reshape(-1, hdim)
                info["versions"] = [e.version for e in ea + eb]
                cached_a, neg_a = va[: len(stale)], va[len(stale):]
                cached_b, neg_b = vb[: len(stale)], vb[len(stale):]
        except BankUnavailable:
            info["skipped"] = True
            # without the bank only the fresh part of the batch is usable
            cached_a = cached_b = neg_a = neg_b = np.zeros((0, hdim))
            negatives = []
            batch = Batch(batch.keys[:nf], batch.x[:nf], y_text=batch.y_text[:nf])
        info["negatives"] = negatives
        info["n_fresh"] = nf
        self.last_negatives = negatives
        return loss_two_tower(self.params, batch.x, batch.y_text, nf, cached_a, cached_b, neg_a, neg_b, spec.temperature)

    def train_step(self, batch: Batch) -> dict:
        """One SGD step; returns the metrics row for this step (loss is pre-update)."""
        out, info = self.compute(batch)
        if not np.isfinite(out.loss) or not all(np.all(np.isfinite(g)) for g in out.grads.values()):
            raise FloatingPointError(f"non-finite loss/gradient at step {self.step}: loss={out.loss}")
        for name, g in out.grads.items():
            self.params.mats[name] = _f32(self.params.mats[name] - self.lr * g)
        self.params.step += 1
        self.last_pushed = {}
        if self.spec.variant == "graph_reg" and self.push_gradients and self.bank is not None:
            if not self._push(batch, out, info):
                info["skipped"] = True
        if info["skipped"]:
            self.stale_skips += 1
        if self.spec.variant == "two_tower":
            acc = float(out.probs[0])
        else:
            acc = _accuracy(out.probs, info["targets"], info["labeled"])
        versions = info["versions"]
        lag = float(np.mean([self.step - 1 - v for v in versions])) if versions else 0.0
        return {
            "step": self.step,
            "loss": out.loss,
            "accuracy": acc,
            "stale_skips": self.stale_skips,
            "mean_neighbor_version_lag": lag,
            "regularizer": out.regularizer,
        }

    def _push(self, batch: Batch, out: LossOutput, info: dict) -> bool:
        grads: Dict[KnowledgeKey, np.ndarray] = {}
        for key, g in zip(batch.keys, out.d_h):
            k = KnowledgeKey(NODE_EMB, key)
            grads[k] = grads.get(k, 0) + g
        if self.push_neighbor_grads:
            nbrs: Neighbors = info["nbrs"]
            for ks, gs in zip(nbrs.keys, out.d_nbr):
                for k, g in zip(ks, gs):
                    grads[k] = grads.get(k, 0) + g
        items = [(k, g, self.embedding_lr) for k, g in grads.items() if np.any(g != 0)]
        try:
            self._bank_call("update_gradients", items, self.source)
            self.last_pushed = {k: g for k, g, _ in items}
            return True
        except BankUnavailable:
            log.debug("gradient push skipped at step %d", self.step)
            return False


def _accuracy(probs, targets, labeled) -> float:
    labeled = np.asarray(labeled, bool)
    if probs is None or not labeled.any():
        return 0.0
    return float(np.mean(np.argmax(probs[labeled], 1) == np.argmax(np.asarray(targets)[labeled], 1)))


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_path(directory, step: int) -> Path:
    return Path(directory) / f"ckpt-{step}.ckb"


def write_checkpoint(params: Params, directory, metadata=None) -> Path:
    """Write ``ckpt-<step>.ckb`` via a ``.tmp`` file and an atomic rename."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ckpt = params.to_checkpoint(metadata)
    final = checkpoint_path(directory, params.step)
    tmp = directory / f"ckpt-{params.step}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, final)
    return final


class MetricsWriter:
    """Append metric rows as CSV to a path or an open text stream."""

    def __init__(self, target) -> None:
        self._own = isinstance(target, (str, os.PathLike))
        self._fh = open(target, "w", newline="") if self._own else target
        self._fh.write(",".join(METRIC_FIELDS) + "\n")

    def write(self, row: dict) -> None:
        vals = []
        for f in METRIC_FIELDS:
            v = row[f]
            vals.append(str(v) if isinstance(v, int) else repr(float(v)))
        self._fh.write(",".join(vals) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._own:
            self._fh.close()
