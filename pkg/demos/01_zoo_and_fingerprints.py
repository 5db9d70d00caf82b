"""Build three synthetic image domains, train a small white-box zoo on each,
and look at what a fingerprint is.

    python demos/01_zoo_and_fingerprints.py [workdir]
"""

import sys

import numpy as np

from dreamkit.fingerprint import build_query_set
from dreamkit.harness import Workspace, split_rows
from dreamkit.zoo import ATTRIBUTE_NAMES, GRID_SIZE, domain_pixel_stats

from _small import small_config

ws = Workspace(small_config(), sys.argv[1] if len(sys.argv) > 1 else "demo-out")

print(f"attribute grid: {GRID_SIZE} combinations over {', '.join(ATTRIBUTE_NAMES)}")
for d, (mean, var) in domain_pixel_stats(ws.datasets).items():
    print(f"domain {d}: style {ws.datasets[d].spec.style:13s} pixel mean {mean:.3f} var {var:.3f}")

zoo = ws.zoo()
for d in zoo.domains:
    accs = [r.val_acc for r in zoo.by_domain(d) if r.status == "ok"]
    print(f"{d}: {len(accs)} models, validation accuracy {np.mean(accs):.2f} "
          f"(min {np.min(accs):.2f}, chance {1 / ws.cfg.data.n_classes:.2f})")

# queries come from the two source domains only; d2 plays the unseen target
queries = build_query_set(ws.datasets, ws.cfg.fingerprint.n_queries, seed=0, sources=["d0", "d1"])
fps = ws.fingerprints(zoo, queries, ["d0", "d1", "d2"])
train = split_rows(fps, zoo, ["d0", "d1", "d2"], "train")
print(f"\n{len(train)} training fingerprints of length C*N = {train.n_classes}*{train.n_queries}")

fp = train.rows[0]
print(f"model {fp.model_id} ({' '.join(fp.attrs.tokens())})")
print("first three query responses:")
print(np.round(fp.vector.reshape(fp.n_queries, fp.n_classes)[:3], 3))

# models of different domains answer the same queries differently
x = train.matrix()
for d in ("d0", "d1", "d2"):
    rows = x[np.array(train.domains()) == d]
    print(f"{d}: mean max-probability {rows.reshape(len(rows), -1, fp.n_classes).max(2).mean():.3f}")
