"""Synthetic datasets, scenario configs and the two ways of running a scenario.

Deterministic mode drives trainer, makers and an in-process bank on one
thread. Checkpoints are published to the makers ``staleness`` steps late,
which is how controlled staleness enters. Networked mode starts
``bank serve``, one ``maker run`` per maker and a ``trainer run`` as OS
processes that talk over the wire protocol, then evaluates the final
checkpoint the same way.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import shutil
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .bank import NEVER, KnowledgeBank, NamespaceConfig
from .core import ConfigError, FeatureRecord, KnowledgeKey, one_hot, shard_of
from .maker import Item, Maker, MakerConfig, poll_checkpoint, write_items
from .trainer import (
    GRAPH,
    IMG_EMB,
    LABELED_EMB,
    LABELS,
    METRIC_FIELDS,
    NODE_EMB,
    TXT_EMB,
    Batch,
    MetricsWriter,
    ModelSpec,
    Params,
    Trainer,
    encode,
    gnn_predict,
    init_params,
    predict,
    tower,
    write_checkpoint,
)

log = logging.getLogger(__name__)

SCENARIOS = ("ssl_graph_reg", "encoder_gnn", "curriculum_label_mine", "graph_agreement", "two_tower")
MODES = ("deterministic", "networked")


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticDataset:
    """Items with ground truth. ``observed`` is -1 where no label is given."""

    keys: List[str]
    x: np.ndarray
    labels: np.ndarray
    observed: np.ndarray
    test: np.ndarray  # bool mask of held-out items
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    y: Optional[np.ndarray] = None  # paired modality for two_tower

    @property
    def n(self) -> int:
        return len(self.keys)

    @property
    def train(self) -> np.ndarray:
        return ~self.test

    @property
    def labeled(self) -> np.ndarray:
        return (self.observed >= 0) & self.train

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def observed_accuracy(self) -> float:
        m = self.labeled
        return float(np.mean(self.observed[m] == self.labels[m])) if m.any() else float("nan")

    def neighbors(self) -> List[List[int]]:
        out: List[List[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            out[i].append(int(j))
            out[j].append(int(i))
        return [sorted(v) for v in out]

    def save(self, path) -> None:
        arrays = dict(keys=np.array(self.keys), x=self.x, labels=self.labels, observed=self.observed, test=self.test, edges=self.edges)
        if self.y is not None:
            arrays["y"] = self.y
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        with np.load(path) as z:
            return cls(
                [str(k) for k in z["keys"]],
                z["x"],
                z["labels"],
                z["observed"],
                z["test"].astype(bool),
                z["edges"],
                z["y"] if "y" in z.files else None,
            )


def _blob_features(rng, labels, classes, dims, separation, nuisance=1.0):
    """Class centers at distance ``separation`` from the origin plus Gaussian noise.

    With ``nuisance != 1`` the centers live in the first quarter of the
    dimensions and the remaining dimensions carry noise of that scale only.
    """
    centers = rng.normal(size=(classes, dims))
    scale = np.ones(dims)
    if nuisance != 1.0:
        informative = max(1, dims // 4)
        centers[:, informative:] = 0.0
        scale[informative:] = nuisance
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    return (centers[labels] + rng.normal(size=(len(labels), dims)) * scale).astype(np.float32)


def _flip(rng, labels, classes, p):
    flip = rng.random(len(labels)) < p
    shift = rng.integers(1, max(classes, 2), len(labels))
    return np.where(flip, (labels + shift) % classes, labels)


def _split(rng, n, test_fraction):
    test = np.zeros(n, bool)
    test[rng.permutation(n)[: int(round(test_fraction * n))]] = True
    return test


def _keys(prefix, n):
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def gen_blobs(
    n: int,
    dims: int,
    classes: int,
    separation: float,
    noise: float,
    seed: int,
    test_fraction: float = 0.0,
    labeled_fraction: float = 1.0,
) -> SyntheticDataset:
    """Gaussian class blobs; each observed label is flipped to a random wrong class with prob ``noise``."""
    if not 0 <= noise < 1:
        raise ValueError("noise must be in [0, 1)")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    x = _blob_features(rng, labels, classes, dims, separation)
    observed = _flip(rng, labels, classes, noise)
    test = _split(rng, n, test_fraction)
    hidden = _unlabeled_mask(rng, labels, ~test, labeled_fraction)
    observed = np.where(hidden | test, -1, observed)
    return SyntheticDataset(_keys("n", n), x, labels, observed, test)


def _unlabeled_mask(rng, labels, pool, fraction):
    """Stratified choice of which pool items keep their label."""
    hidden = pool.copy()
    for c in np.unique(labels):
        idx = np.flatnonzero(pool & (labels == c))
        keep = max(1, int(round(fraction * len(idx)))) if len(idx) else 0
        hidden[rng.permutation(idx)[:keep]] = False
    return hidden


def gen_sbm(
    n: int,
    classes: int,
    p_in: float,
    p_out: float,
    dims: int,
    seed: int,
    separation: float = 1.0,
    labeled_fraction: float = 0.1,
    nuisance: float = 1.0,
) -> SyntheticDataset:
    """Stochastic block model with blob features; unlabeled nodes are the test set."""
    if not 0 <= p_out < p_in <= 1:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    rng = np.random.default_rng(seed)
    labels = np.sort(rng.integers(0, classes, n))
    x = _blob_features(rng, labels, classes, dims, separation, nuisance)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    everyone = np.ones(n, bool)
    hidden = _unlabeled_mask(rng, labels, everyone, labeled_fraction)
    observed = np.where(hidden, -1, labels)
    return SyntheticDataset(_keys("n", n), x, labels, observed, hidden, edges)


def gen_pairs(n: int, dims: int, text_dims: int, latent: int, noise: float, seed: int, test_fraction: float = 0.2) -> SyntheticDataset:
    """Paired views ``x = z Mx + e``, ``y = z My + e'`` of a shared latent ``z``."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, latent))
    mx = rng.normal(size=(latent, dims)) / math.sqrt(latent)
    my = rng.normal(size=(latent, text_dims)) / math.sqrt(latent)
    x = (z @ mx + noise * rng.normal(size=(n, dims))).astype(np.float32)
    y = (z @ my + noise * rng.normal(size=(n, text_dims))).astype(np.float32)
    zeros = np.zeros(n, np.int64)
    return SyntheticDataset(_keys("p", n), x, zeros, zeros - 1, _split(rng, n, test_fraction), y=y)


# --------------------------------------------------------------------------
# scenario config


@dataclass
class Scenario:
    name: str = "ssl_graph_reg"
    seed: int = 0
    # dataset
    n: int = 200
    dims: int = 16
    classes: int = 2
    separation: float = 1.0
    nuisance: float = 1.0
    noise: float = 0.0
    p_in: float = 0.1
    p_out: float = 0.01
    labeled_fraction: float = 0.1
    test_fraction: float = 0.2
    text_dims: int = 16
    latent_dim: int = 4
    # system
    num_shards: int = 4
    flush_expiry: Optional[int] = None  # ticks; None never expires
    maker_count: int = 1
    maker_poll_ms: int = 5
    staleness: int = 0
    # training
    hidden_dim: int = 8
    lr: float = 0.5
    lam: float = 0.0
    steps: int = 200
    batch_size: int = 0  # 0 trains on the full training set every step
    ckpt_every: int = 1
    push_gradients: bool = True
    push_neighbor_grads: bool = False
    temperature: float = 0.1
    fresh_fraction: float = 0.5
    num_negatives: int = 0
    # makers
    tau: float = 0.9
    mining_rounds: int = 3
    k: int = 5
    sigma_min: float = 0.0
    graph_build: bool = False

    def __post_init__(self) -> None:
        if self.name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.name!r}")
        if self.staleness < 0 or self.steps < 1 or self.ckpt_every < 1 or self.maker_count < 1:
            raise ConfigError("staleness >= 0, steps >= 1, ckpt_every >= 1 and maker_count >= 1 required")

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_json(Path(path).read_text())

    @classmethod
    def preset(cls, name: str, **overrides) -> "Scenario":
        """Tuned defaults for each scenario."""
        base = dict(PRESETS.get(name, {}))
        base.update(overrides)
        return cls(name=name, **base)

    @property
    def variant(self) -> str:
        return {"encoder_gnn": "encoder_gnn", "two_tower": "two_tower"}.get(self.name, "graph_reg")

    @property
    def checkpoint_interval(self) -> int:
        if self.name == "curriculum_label_mine" and self.mining_rounds > 0:
            return max(1, self.steps // self.mining_rounds)
        return self.ckpt_every


PRESETS: Dict[str, dict] = {
    "ssl_graph_reg": dict(n=200, dims=16, separation=2.0, nuisance=3.0, p_in=0.1, p_out=0.01, labeled_fraction=0.1, lam=1.0, lr=0.05, steps=400),
    "encoder_gnn": dict(n=200, dims=16, separation=2.0, nuisance=3.0, p_in=0.1, p_out=0.01, labeled_fraction=0.1, lr=0.05, steps=200),
    "curriculum_label_mine": dict(n=600, dims=30, separation=6.0, noise=0.3, test_fraction=0.3, lam=0.0, lr=0.3, steps=240),
    "graph_agreement": dict(n=400, dims=8, separation=3.0, labeled_fraction=0.05, test_fraction=0.25, k=5, steps=150),
    "two_tower": dict(n=600, dims=16, text_dims=12, latent_dim=6, noise=0.5, hidden_dim=8, batch_size=4, lr=0.2, steps=300),
}


def build_dataset(scn: Scenario) -> SyntheticDataset:
    if scn.name in ("ssl_graph_reg", "encoder_gnn"):
        return gen_sbm(scn.n, scn.classes, scn.p_in, scn.p_out, scn.dims, scn.seed, scn.separation, scn.labeled_fraction, scn.nuisance)
    if scn.name == "two_tower":
        return gen_pairs(scn.n, scn.dims, scn.text_dims, scn.latent_dim, scn.noise, scn.seed, scn.test_fraction)
    labeled = 1.0 if scn.name == "curriculum_label_mine" else scn.labeled_fraction
    return gen_blobs(scn.n, scn.dims, scn.classes, scn.separation, scn.noise, scn.seed, scn.test_fraction, labeled)


# --------------------------------------------------------------------------
# pieces shared by both modes


def namespaces(scn: Scenario) -> List[NamespaceConfig]:
    expiry = {} if scn.flush_expiry is None else {"flush_expiry_ticks": scn.flush_expiry}
    return [
        NamespaceConfig(NODE_EMB, "embeddings", scn.hidden_dim, **expiry),
        NamespaceConfig(LABELED_EMB, "embeddings", scn.hidden_dim, **expiry),
        NamespaceConfig(IMG_EMB, "embeddings", scn.hidden_dim, **expiry),
        NamespaceConfig(TXT_EMB, "embeddings", scn.hidden_dim, **expiry),
        NamespaceConfig(GRAPH, "features"),
        NamespaceConfig(LABELS, "features"),
    ]


def seed_bank(bank, scn: Scenario, ds: SyntheticDataset) -> None:
    """Load the static graph and the observed training labels. Ground truth stays out."""
    writes = []
    if len(ds.edges):
        for i, nbrs in enumerate(ds.neighbors()):
            rec = FeatureRecord([(KnowledgeKey(NODE_EMB, ds.keys[j]), 1.0) for j in nbrs])
            writes.append((KnowledgeKey(GRAPH, ds.keys[i]), rec))
    if scn.variant != "two_tower":
        for i in np.flatnonzero(ds.labeled):
            rec = FeatureRecord(label_dist=one_hot(int(ds.observed[i]), ds.num_classes), provenance="observed")
            writes.append((KnowledgeKey(LABELS, ds.keys[i]), rec))
    for start in range(0, len(writes), 256):
        bank.set_features_many(writes[start:start + 256])


@dataclass
class MakerPlan:
    name: str
    config: dict
    items: List[Item]

    def partitions(self, count: int) -> List[List[Item]]:
        ns = self.config.get("namespace") or NODE_EMB
        parts: List[List[Item]] = [[] for _ in range(count)]
        for it in self.items:
            parts[shard_of(KnowledgeKey(ns, it.key), count)].append(it)
        return parts


def maker_plans(scn: Scenario, ds: SyntheticDataset) -> List[MakerPlan]:
    def items(mask, features=None):
        feats = ds.x if features is None else features
        return [Item(ds.keys[i], feats[i]) for i in np.flatnonzero(mask)]

    everyone = np.ones(ds.n, bool)
    if scn.name == "ssl_graph_reg":
        return [MakerPlan("refresh", dict(task="embed_refresh"), items(everyone))]
    if scn.name == "encoder_gnn":
        plans = [MakerPlan("refresh", dict(task="embed_refresh"), items(everyone))]
        if scn.graph_build:
            plans.append(MakerPlan("graph", dict(task="graph_build", k=scn.k, sigma_min=scn.sigma_min), items(everyone)))
        return plans
    if scn.name == "curriculum_label_mine":
        if scn.mining_rounds <= 0:
            return []
        return [MakerPlan("mine", dict(task="label_mine", tau=scn.tau, min_step=1), items(ds.train))]
    if scn.name == "graph_agreement":
        unlabeled = ds.train & ~ds.labeled
        return [
            MakerPlan("refresh-labeled", dict(task="embed_refresh", namespace=LABELED_EMB), items(ds.labeled)),
            MakerPlan("refresh", dict(task="embed_refresh"), items(unlabeled)),
            MakerPlan("agree", dict(task="graph_agree", k=scn.k, num_classes=ds.num_classes), items(unlabeled)),
        ]
    return [
        MakerPlan("refresh-image", dict(task="embed_refresh", namespace=IMG_EMB, encoder="image"), items(ds.train)),
        MakerPlan("refresh-text", dict(task="embed_refresh", namespace=TXT_EMB, encoder="text"), items(ds.train, ds.y)),
    ]


def model_spec(scn: Scenario, ds: SyntheticDataset) -> ModelSpec:
    text_dim = ds.y.shape[1] if ds.y is not None else None
    classes = max(ds.num_classes, 2)
    return ModelSpec(scn.variant, ds.x.shape[1], scn.hidden_dim, classes, scn.temperature, scn.lam, scn.fresh_fraction, text_dim)


def make_trainer(scn: Scenario, ds: SyntheticDataset, bank) -> Trainer:
    spec = model_spec(scn, ds)
    # bank-free baselines train on the observed labels directly
    from_bank = bank is not None and scn.name in ("curriculum_label_mine", "graph_agreement")
    label_source = "bank" if from_bank else "data"
    pool = [ds.keys[i] for i in np.flatnonzero(ds.train)] if scn.variant == "two_tower" else ()
    return Trainer(
        spec,
        init_params(spec, scn.seed),
        bank,
        lr=scn.lr,
        label_source=label_source,
        push_gradients=scn.push_gradients,
        push_neighbor_grads=scn.push_neighbor_grads,
        negative_pool=pool,
        num_negatives=scn.num_negatives,
        seed=scn.seed,
        label_noise=scn.noise if scn.name == "curriculum_label_mine" else 0.0,
    )


def batch_for_step(scn: Scenario, ds: SyntheticDataset, step: int) -> Batch:
    """Deterministic in (seed, step) so separate trainer processes see the same batches."""
    if scn.name in ("ssl_graph_reg", "encoder_gnn"):
        idx = np.arange(ds.n)  # transductive: every node, labels only where observed
    else:
        idx = np.flatnonzero(ds.train)
    if scn.batch_size and scn.batch_size < len(idx):
        rng = np.random.default_rng([scn.seed, step])
        idx = np.sort(rng.choice(idx, size=scn.batch_size, replace=False))
    keys = [ds.keys[i] for i in idx]
    x = ds.x[idx].astype(np.float64)
    if scn.variant == "two_tower":
        return Batch(keys, x, y_text=ds.y[idx].astype(np.float64))
    classes = max(ds.num_classes, 2)
    observed = ds.observed[idx]
    labeled = (observed >= 0) & ds.train[idx]
    targets = np.zeros((len(idx), classes))
    targets[labeled, observed[labeled]] = 1.0
    return Batch(keys, x, targets, labeled)


def visible_step(scn: Scenario, t: int) -> int:
    """Newest checkpoint the makers may use after trainer step ``t``."""
    lagged = t - scn.staleness
    if lagged <= 0:
        return 0
    every = scn.checkpoint_interval
    return lagged if lagged == scn.steps else (lagged // every) * every


def refresh_keys(scn: Scenario, ds: SyntheticDataset) -> List[KnowledgeKey]:
    """Embedding keys written by refresh makers; the staleness barrier watches these."""
    keys = []
    for plan in maker_plans(scn, ds):
        if plan.config["task"] == "embed_refresh":
            ns = plan.config.get("namespace", NODE_EMB)
            keys.extend(KnowledgeKey(ns, it.key) for it in plan.items)
    return keys


def training_loop(
    trainer: Trainer,
    scn: Scenario,
    ds: SyntheticDataset,
    ckpt_dir,
    metrics: MetricsWriter,
    before_step: Optional[Callable[[int], None]] = None,
    after_step: Optional[Callable[[int], None]] = None,
) -> Params:
    write_checkpoint(trainer.params, ckpt_dir)
    if after_step:
        after_step(0)
    every = scn.checkpoint_interval
    for t in range(1, scn.steps + 1):
        if before_step:
            before_step(t)
        row = trainer.train_step(batch_for_step(scn, ds, t))
        metrics.write(row)
        if scn.flush_expiry is not None and trainer.bank is not None:
            try:
                trainer.bank.tick_expiry()
            except (TimeoutError, ConnectionError) as exc:
                log.warning("expiry tick failed at step %d: %s", t, exc)
        if t % every == 0 or t == scn.steps:
            write_checkpoint(trainer.params, ckpt_dir)
        if after_step:
            after_step(t)
    return trainer.params


# --------------------------------------------------------------------------
# evaluation


def recall_at_1(params: Params, x: np.ndarray, y: np.ndarray) -> float:
    a = tower(params["A"], x)
    b = tower(params["B"], y)
    a /= np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
    b /= np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-300)
    return float(np.mean(np.argmax(a @ b.T, axis=1) == np.arange(len(x))))


def label_accuracy(bank, ds: SyntheticDataset, mask: np.ndarray) -> float:
    """Fraction of masked items whose bank label matches the ground truth (missing counts as wrong)."""
    idx = np.flatnonzero(mask)
    if not len(idx):
        return float("nan")
    recs = bank.lookup_features([KnowledgeKey(LABELS, ds.keys[i]) for i in idx])
    hits = [r is not None and r.label_dist is not None and int(np.argmax(r.label_dist)) == ds.labels[i] for i, r in zip(idx, recs)]
    return float(np.mean(hits))


def evaluate(scn: Scenario, ds: SyntheticDataset, params: Params, bank) -> dict:
    test = np.flatnonzero(ds.test)
    out: dict = {"final_step": params.step}
    if scn.variant == "two_tower":
        out["recall_at_1"] = recall_at_1(params, ds.x[test].astype(np.float64), ds.y[test].astype(np.float64))
        out["test_accuracy"] = out["recall_at_1"]
        return out
    x = ds.x.astype(np.float64)
    if scn.variant == "encoder_gnn":
        recs = bank.lookup_features([KnowledgeKey(GRAPH, ds.keys[i]) for i in test])
        index = {k: i for i, k in enumerate(ds.keys)}
        nbr_embs = []
        for rec in recs:
            ids = [index[k.id.decode()] for k, _ in rec.neighbors] if rec else []
            nbr_embs.append(encode(params["W"], x[ids]) if ids else np.zeros((0, scn.hidden_dim)))
        probs = gnn_predict(params, x[test], nbr_embs)
    else:
        probs = predict(params, x[test])
    out["test_accuracy"] = float(np.mean(np.argmax(probs, axis=1) == ds.labels[test]))
    if scn.name in ("curriculum_label_mine", "graph_agreement"):
        out["initial_label_accuracy"] = ds.observed_accuracy()
        out["bank_label_accuracy"] = label_accuracy(bank, ds, ds.train)
    return out


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{k: (int(v) if k in ("step", "stale_skips") else float(v)) for k, v in row.items()} for row in reader]


# --------------------------------------------------------------------------
# deterministic mode


class DeterministicRun:
    """Bank, makers and trainer on one thread; makers see checkpoints ``staleness`` steps late."""

    def __init__(self, scn: Scenario, out_dir, dataset: Optional[SyntheticDataset] = None, bank: Optional[KnowledgeBank] = None) -> None:
        self.scn = scn
        self.out = Path(out_dir)
        self.ds = dataset if dataset is not None else build_dataset(scn)
        self.bank = bank if bank is not None else KnowledgeBank(namespaces(scn), scn.num_shards)
        self.ckpt_dir = self.out / "checkpoints"
        self.published = self.out / "published"
        self.published.mkdir(parents=True, exist_ok=True)
        seed_bank(self.bank, scn, self.ds)
        self.trainer = make_trainer(scn, self.ds, self.bank)
        self.makers: List[Maker] = []
        for plan in maker_plans(scn, self.ds):
            for part in plan.partitions(scn.maker_count):
                cfg = MakerConfig(self.published, poll_interval=scn.maker_poll_ms / 1000, batch_size=max(1, len(plan.items)), seed=scn.seed, **plan.config)
                self.makers.append(Maker(cfg, self.bank, part, sleep=lambda s: None))
        self._published_step: Optional[int] = None
        self.hooks: List[Callable[[int], None]] = []

    def _after_step(self, t: int) -> None:
        target = visible_step(self.scn, t)
        if target != self._published_step:
            name = f"ckpt-{target}.ckb"
            shutil.copyfile(self.ckpt_dir / name, self.published / ".incoming")
            os.replace(self.published / ".incoming", self.published / name)
            self._published_step = target
        for m in self.makers:
            m.run_until_idle()
        for hook in self.hooks:
            hook(t)

    def run(self) -> dict:
        started = time.perf_counter()
        metrics = MetricsWriter(self.out / "metrics.csv")
        try:
            params = training_loop(self.trainer, self.scn, self.ds, self.ckpt_dir, metrics, after_step=self._after_step)
        finally:
            metrics.close()
        summary = {"scenario": self.scn.name, "mode": "deterministic", "seed": self.scn.seed, "staleness": self.scn.staleness}
        summary.update(evaluate(self.scn, self.ds, params, self.bank))
        summary["stale_skips"] = self.trainer.stale_skips
        summary["runtime_s"] = round(time.perf_counter() - started, 3)
        write_summary(self.out, summary)
        return summary


def write_summary(out_dir, summary: dict) -> None:
    Path(out_dir, "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# networked mode


def _namespace_flag(cfg: NamespaceConfig) -> str:
    parts = [cfg.name, cfg.kind.value, str(cfg.dim)]
    if cfg.flush_expiry_ticks != NEVER:
        parts.append(str(cfg.flush_expiry_ticks))
    return ":".join(parts)


def _cli(*args) -> List[str]:
    return [sys.executable, "-m", "carls", *map(str, args)]


class NetworkedRun:
    """Runs each component as its own process and collects their logs."""

    def __init__(self, scn: Scenario, out_dir, timeout: float = 300.0) -> None:
        self.scn = scn
        self.out = Path(out_dir)
        self.timeout = timeout
        self.ds = build_dataset(scn)
        self.logs = self.out / "logs"
        self.procs: Dict[str, subprocess.Popen] = {}

    def _spawn(self, name: str, argv: Sequence[str]) -> subprocess.Popen:
        fh = open(self.logs / f"{name}.log", "w")
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        proc = subprocess.Popen(argv, stdout=fh, stderr=subprocess.STDOUT, env=env)
        fh.close()
        self.procs[name] = proc
        return proc

    def _failure(self, what: str) -> ConfigError:
        tails = []
        for name in self.procs:
            text = (self.logs / f"{name}.log").read_text(errors="replace").strip().splitlines()[-15:]
            tails.append(f"--- {name} ---\n" + "\n".join(text))
        return ConfigError(f"{what}\n" + "\n".join(tails))

    def _wait_ready(self, ready: Path, proc: subprocess.Popen) -> str:
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            if ready.exists() and ready.read_text().strip():
                return ready.read_text().strip()
            if proc.poll() is not None:
                raise self._failure("bank server exited during startup")
            time.sleep(0.01)
        raise self._failure("bank server did not become ready")

    def _stop(self, name: str) -> None:
        proc = self.procs[name]
        if proc.poll() is None:
            proc.send_signal(signal.SIGTERM)
            try:
                proc.wait(10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def run(self) -> dict:
        from .rpc import RemoteBank

        scn, ds, out = self.scn, self.ds, self.out
        started = time.perf_counter()
        self.logs.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        data_path, cfg_path, ready = out / "data.npz", out / "scenario.json", out / "bank.ready"
        ds.save(data_path)
        scn.save(cfg_path)
        if ready.exists():
            ready.unlink()
        argv = ["bank", "serve", "--endpoint", "127.0.0.1:0", "--shards", scn.num_shards, "--ready-file", ready, "--seed", scn.seed]
        for cfg in namespaces(scn):
            argv += ["--namespace", _namespace_flag(cfg)]
        bank_proc = self._spawn("bank", _cli(*argv))
        bank = None
        try:
            endpoint = self._wait_ready(ready, bank_proc)
            bank = RemoteBank.connect(endpoint, timeout=30)
            seed_bank(bank, scn, ds)
            for plan in maker_plans(scn, ds):
                for i, part in enumerate(plan.partitions(scn.maker_count)):
                    items_path = out / f"items-{plan.name}-{i}.tsv"
                    write_items(items_path, part)
                    argv = ["maker", "run", "--bank", endpoint, "--checkpoint-dir", ckpt_dir, "--input", items_path,
                            "--poll-ms", scn.maker_poll_ms, "--seed", scn.seed, "--batch-size", max(1, len(part))]
                    for key, value in plan.config.items():
                        argv += [f"--{key.replace('_', '-')}", value]
                    self._spawn(f"maker-{plan.name}-{i}", _cli(*argv))
            trainer = self._spawn(
                "trainer",
                _cli("trainer", "run", "--scenario", cfg_path, "--data", data_path, "--bank", endpoint,
                     "--ckpt-dir", ckpt_dir, "--metrics", out / "metrics.csv", "--seed", scn.seed),
            )
            try:
                code = trainer.wait(self.timeout)
            except subprocess.TimeoutExpired:
                trainer.kill()
                raise self._failure("trainer timed out") from None
            if code != 0:
                raise self._failure(f"trainer exited with status {code}")
            for name in self.procs:
                if name.startswith("maker-"):
                    if self.procs[name].poll() is not None:
                        raise self._failure(f"{name} died with status {self.procs[name].returncode}")
            # let makers finish the final checkpoint before evaluating bank state
            self._drain_makers(bank)
            params = Params.from_checkpoint(poll_checkpoint(ckpt_dir))
            summary = {"scenario": scn.name, "mode": "networked", "seed": scn.seed, "staleness": scn.staleness}
            summary.update(evaluate(scn, ds, params, bank))
            rows = read_metrics(out / "metrics.csv")
            summary["stale_skips"] = rows[-1]["stale_skips"] if rows else 0
        finally:
            for name in list(self.procs):
                if name != "bank":
                    self._stop(name)
            if bank is not None:
                bank.close()
            self._stop("bank")
        summary["runtime_s"] = round(time.perf_counter() - started, 3)
        write_summary(out, summary)
        return summary

    def _drain_makers(self, bank) -> None:
        keys = refresh_keys(self.scn, self.ds)
        if keys:
            wait_for_versions(bank, keys, self.scn.steps, timeout=60)
        elif any(n.startswith("maker-") for n in self.procs):
            # label makers leave no version trail; give them a few poll periods
            time.sleep(max(0.2, 20 * self.scn.maker_poll_ms / 1000))


def wait_for_versions(bank, keys: Sequence[KnowledgeKey], target: int, timeout: float = 60.0, poll: float = 0.002) -> None:
    """Block until every key holds an embedding of version >= ``target``."""
    deadline = time.monotonic() + timeout
    while True:
        entries = bank.lookup_embeddings(list(keys), create=False)
        if all(e is not None and e.version >= target for e in entries):
            return
        if time.monotonic() > deadline:
            behind = sum(1 for e in entries if e is None or e.version < target)
            raise TimeoutError(f"{behind} embeddings still older than step {target}")
        time.sleep(poll)


def run_trainer_process(scn: Scenario, ds: SyntheticDataset, bank, ckpt_dir, metrics_target, barrier: bool = True) -> Params:
    """Trainer side of networked mode.

    Before each step the trainer waits until the refresh makers have caught
    up to the checkpoint they would have seen in deterministic mode, which
    caps staleness at ``scn.staleness`` steps.
    """
    trainer = make_trainer(scn, ds, bank)
    keys = refresh_keys(scn, ds) if barrier and bank is not None else []

    def before_step(t: int) -> None:
        if keys:
            wait_for_versions(bank, keys, visible_step(scn, t - 1))

    metrics = MetricsWriter(metrics_target)
    try:
        return training_loop(trainer, scn, ds, ckpt_dir, metrics, before_step=before_step)
    finally:
        metrics.close()


# --------------------------------------------------------------------------
# entry points


def run_scenario(scn: Scenario, out_dir, mode: str = "deterministic", **kwargs) -> dict:
    """Run ``scn`` and write ``metrics.csv`` and ``summary.json`` under ``out_dir``."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if mode == "deterministic":
        return DeterministicRun(scn, out, **kwargs).run()
    return NetworkedRun(scn, out, **kwargs).run()


@dataclass
class Comparison:
    accuracy_delta: float
    max_loss_divergence: float
    max_accuracy_divergence: float
    steps_compared: int
    length_mismatch: int
    tolerance: float

    @property
    def passed(self) -> bool:
        worst = max(abs(self.accuracy_delta), self.max_loss_divergence, self.max_accuracy_divergence)
        return self.length_mismatch == 0 and worst <= self.tolerance

    def report(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} final accuracy delta {self.accuracy_delta:+.6g}, "
            f"max loss divergence {self.max_loss_divergence:.3g}, "
            f"max accuracy divergence {self.max_accuracy_divergence:.3g} "
            f"over {self.steps_compared} steps (tolerance {self.tolerance:g})"
            + (f", {self.length_mismatch} unmatched rows" if self.length_mismatch else "")
        )


def _run_files(path):
    p = Path(path)
    if p.is_dir():
        summary = p / "summary.json"
        return p / "metrics.csv", json.loads(summary.read_text()) if summary.exists() else None
    return p, None


def compare_runs(a, b, tolerance: float = 1e-6) -> Comparison:
    """Compare two runs given as metrics CSVs or run directories.

    With run directories the final accuracy comes from ``summary.json``
    (held-out accuracy); with bare CSVs it is the last row's training accuracy.
    """
    (ma, sa), (mb, sb) = _run_files(a), _run_files(b)
    ra, rb = read_metrics(ma), read_metrics(mb)
    n = min(len(ra), len(rb))
    loss_div = max((abs(x["loss"] - y["loss"]) for x, y in zip(ra, rb)), default=0.0)
    acc_div = max((abs(x["accuracy"] - y["accuracy"]) for x, y in zip(ra, rb)), default=0.0)
    if sa is not None and sb is not None:
        delta = sb["test_accuracy"] - sa["test_accuracy"]
    else:
        delta = (rb[-1]["accuracy"] if rb else 0.0) - (ra[-1]["accuracy"] if ra else 0.0)
    return Comparison(delta, loss_div, acc_div, n, abs(len(ra) - len(rb)), tolerance)
