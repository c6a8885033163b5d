"""
The same run, in one process and across many
============================================

The deterministic mode steps the bank, makers and trainer on one thread. The
networked mode starts ``carls bank serve``, one ``carls maker run`` per
tower and ``carls trainer run`` as separate processes talking over TCP.
With zero staleness the two produce identical metrics.

The two-tower model pairs "images" with "captions". Besides the other pairs
in its batch, each step also contrasts against embeddings of other items
cached in the bank.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from carls import Scenario, compare_runs, run_scenario

out = Path(tempfile.mkdtemp(prefix="towers-"))
scn = Scenario.preset("two_tower", steps=60, num_negatives=40)

local = run_scenario(scn, out / "deterministic")
remote = run_scenario(scn, out / "networked", mode="networked")
print(compare_runs(out / "deterministic", out / "networked").report())
print("recall@1:", local["recall_at_1"], "vs", remote["recall_at_1"])
print("process logs:", out / "networked" / "logs")
