"""
Curriculum learning by mining labels
====================================

A third of the training labels are wrong. After each phase of training, a
label-mining maker overwrites any label the model is confident about
(max probability at least tau). The next phase trains on the cleaned labels.
Observed labels are fit through a noisy-label channel, so the model's
posterior estimates the clean class and its confidence means something.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from carls import Scenario, run_scenario

out = Path(tempfile.mkdtemp(prefix="mine-"))
mined = run_scenario(Scenario.preset("curriculum_label_mine"), out / "mined")
never = run_scenario(Scenario.preset("curriculum_label_mine", mining_rounds=0), out / "never")

print(f"label accuracy before mining: {mined['initial_label_accuracy']:.3f}")
print(f"label accuracy after mining:  {mined['bank_label_accuracy']:.3f}")
print(f"test accuracy, mined:         {mined['test_accuracy']:.3f}")
print(f"test accuracy, never mined:   {never['test_accuracy']:.3f}")
