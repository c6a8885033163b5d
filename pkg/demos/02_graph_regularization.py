"""
Graph-regularized semi-supervised learning
==========================================

Only 10% of the nodes of a two-block graph carry labels. The regularizer
pulls each node's embedding toward its neighbours' embeddings, which are
read back from the bank after a knowledge maker recomputes them from the
latest checkpoint. ``staleness`` makes the maker lag the trainer by that
many steps.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from carls import Scenario, run_scenario

out = Path(tempfile.mkdtemp(prefix="ssl-"))
print(f"{'lambda':>6} {'staleness':>9} {'test acc':>8}")
for lam, staleness in ((0.0, 0), (1.0, 0), (1.0, 1), (1.0, 4)):
    scn = Scenario.preset("ssl_graph_reg", lam=lam, staleness=staleness)
    summary = run_scenario(scn, out / f"lam{lam}-T{staleness}")
    print(f"{lam:6.1f} {staleness:9d} {summary['test_accuracy']:8.3f}")
print("per-step metrics live under", out)
