"""The two harder settings: source models trained on a class subset, and
attribute combinations that never appear in both training and test.

    python demos/03_domain_shift.py [workdir]
"""

import sys

from dreamkit.harness import Workspace, run_domain_shift

from _small import small_config

ws = Workspace(small_config(), sys.argv[1] if len(sys.argv) > 1 else "demo-out")
common = dict(methods=("random", "kennen", "dream"), seeds=(3,), tune_lambda=False)

# source models only ever saw classes 0-3; target fingerprints keep those columns
print(run_domain_shift(ws, "class_subset", classes=[0, 1, 2, 3], **common).to_text())

# no attribute vector is shared between the training and test models
print(run_domain_shift(ws, "disjoint", **common).to_text())
