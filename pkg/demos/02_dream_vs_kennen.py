"""Hold out one domain, fit the plain reverse classifier and the adversarial
one on the other two, and compare accuracy and domain invariance.

    python demos/02_dream_vs_kennen.py [workdir]
"""

import sys

from dreamkit.harness import (ExperimentPlan, Workspace, class_loss_drop, held_out_sources, invariance_probe,
                              random_row, run_lodo)
from dreamkit.zoo import ATTRIBUTE_NAMES

from _small import small_config

ws = Workspace(small_config(), sys.argv[1] if len(sys.argv) > 1 else "demo-out")
plan = ExperimentPlan("d2", ("d0", "d1"), methods=("random", "svm", "kennen", "dream"), seeds=(3,),
                      tune_lambda=False)

fits = {}
table = run_lodo(ws, plan, on_fit=lambda p, t, fit, data: fits.__setitem__(fit.method, (fit, data)))
print(table.to_text())
print("chance per attribute:", ", ".join(f"{a} {v:.1f}" for a, v in zip(ATTRIBUTE_NAMES, random_row())))

fit, data = fits["dream"]
print(f"({len(data.test)} held-out target models, so single-model swings are {100 / len(data.test):.0f} points)")
first, tail = class_loss_drop(fit.model.state.history)
print(f"\nclassifier loss: first iteration {first:.3f}, last 10% {tail:.3f}")

# probe domain identity on source models that neither method was fit on
held = held_out_sources(ws, data, plan.sources)
raw, z = invariance_probe(fit.model, held)
print(f"domain probe on raw fingerprints {100 * raw:.1f}%, on embeddings {100 * z:.1f}% (chance 50%)")
