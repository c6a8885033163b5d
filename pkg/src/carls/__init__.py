"""A knowledge bank shared by trainers and asynchronous knowledge makers.

The bank stores embeddings and feature records in sharded memory and applies
gradient updates lazily. Makers refresh its contents from trainer checkpoints
while training carries on. ``carls.harness`` wires the pieces into runnable
scenarios, and ``python -m carls`` exposes them on the command line.
"""

from __future__ import annotations

from .bank import KnowledgeBank, NamespaceConfig
from .core import (
    CarlsError,
    Checkpoint,
    ConfigError,
    EmbeddingEntry,
    FeatureRecord,
    KnowledgeKey,
    shard_of,
)
from .harness import DeterministicRun, NetworkedRun, Scenario, compare_runs, run_scenario
from .maker import Maker, MakerConfig
from .rpc import BankServer, RemoteBank
from .trainer import ModelSpec, Params, Trainer

__version__ = "0.1.0"

__all__ = [
    "BankServer",
    "CarlsError",
    "Checkpoint",
    "ConfigError",
    "DeterministicRun",
    "EmbeddingEntry",
    "FeatureRecord",
    "KnowledgeBank",
    "KnowledgeKey",
    "Maker",
    "MakerConfig",
    "ModelSpec",
    "NamespaceConfig",
    "NetworkedRun",
    "Params",
    "RemoteBank",
    "Scenario",
    "Trainer",
    "compare_runs",
    "run_scenario",
    "shard_of",
]
