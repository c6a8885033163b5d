"""
Lazy gradient updates in the knowledge bank
===========================================

Gradients pushed to the bank wait in a per-key queue. They are averaged
into the stored vector when someone reads the key, or when the queue ages
past the namespace's expiry. With three or more queued deltas, the ones far
larger than the median are dropped first.
"""

from __future__ import annotations

import numpy as np

from carls import KnowledgeBank, KnowledgeKey, NamespaceConfig

bank = KnowledgeBank([NamespaceConfig("node_emb", "embeddings", 3, flush_expiry_ticks=4)], num_shards=4)
key = KnowledgeKey("node_emb", "paris")
bank.set_embedding(key, [1.0, 0.0, 0.0], version=1)

# three ordinary gradients and one wild one
for g in ([0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.1, 0.1, 0.0], [50.0, -50.0, 0.0]):
    bank.update_gradient(key, g, learning_rate=1.0, source="trainer-0")
print("pending per shard:", [s.pending_keys for s in bank.stats()])

# reading the key applies the mean of the surviving deltas
entry = bank.lookup_embeddings([key])[0]
print("after flush:", entry.vector, "version", entry.version)

# %%
# Nearest neighbours are merged across shards, with ties broken by key id.
rng = np.random.default_rng(0)
for i in range(50):
    bank.set_embedding(KnowledgeKey("node_emb", f"city{i:02d}"), rng.normal(size=3))
hits = bank.knn_search("node_emb", [1.0, 0.0, 0.0], k=3, metric="cosine").hits
for k, score in hits:
    print(f"{k.id.decode():>8}  {score:.3f}")
