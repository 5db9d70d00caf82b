import numpy as np
import pytest

H = 1e-5
TOL = 1e-4
INSTANCES = 20


def numeric_grad(f, arr: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f()`` wrt every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    # floor keeps exactly-zero gradients (conv bias under batchnorm) from dividing roundoff by roundoff
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_fingerprints(per_domain=30, domains=("a", "b", "c"), n_classes=3, n_queries=4, seed=0,
                           domain_shift=1.5):
    """Labelled fingerprints whose logits depend on the attribute labels plus a per-domain offset."""
    from dreamkit.fingerprint import Fingerprint, FingerprintSet
    from dreamkit.zoo import AttributeVector, HEAD_SIZES

    rng = np.random.default_rng(seed)
    d = n_classes * n_queries
    proj = [rng.normal(size=(k, d)) for k in HEAD_SIZES]
    offsets = {dom: rng.normal(scale=domain_shift, size=d) for dom in domains}
    rows = []
    for dom in domains:
        for j in range(per_domain):
            idx = [int(rng.integers(k)) for k in HEAD_SIZES]
            logits = sum(p[i] for p, i in zip(proj, idx)) * 0.5 + offsets[dom] + rng.normal(scale=0.3, size=d)
            blocks = logits.reshape(n_queries, n_classes)
            blocks = np.exp(blocks - blocks.max(1, keepdims=True))
            blocks /= blocks.sum(1, keepdims=True)
            rows.append(Fingerprint(f"{dom}-{j:05d}", dom, blocks.ravel(), n_classes, n_queries,
                                    AttributeVector.from_indices(idx)))
    return FingerprintSet(rows, len(domains), n_classes, n_queries)


def small_dream_config(**kw):
    from dreamkit.config import DreamConfig

    base = dict(embed_dim=6, gen_hidden=8, disc_hidden=(7, 5), trunk_width=9, batch_size=8, epochs=30,
                alpha=1e-3, beta=1e-3, init_std=0.3)
    base.update(kw)
    return DreamConfig(**base)


def tiny_config(**sections):
    """A config whose whole pipeline (3 domains, 14 models each) runs in seconds."""
    from dreamkit.config import Config

    raw = {
        "seed": 11,
        "data": {"n_classes": 3, "side": 8, "samples_per_class": 20},
        "zoo": {"models_per_domain": 14, "epochs": 1, "conv_channels": 2, "fc_width": 4,
                "disjoint_sizes": [4, 1, 1]},
        "fingerprint": {"n_queries": 4},
        "dream": {"embed_dim": 6, "gen_hidden": 8, "disc_hidden": [7, 5], "trunk_width": 9, "batch_size": 8,
                  "epochs": 5, "alpha": 1e-3, "beta": 1e-3, "lambda_grid": [0.1, 1.0]},
        "baselines": {"epochs": 5, "batch_size": 8, "lr": 1e-3, "gamma_grid": [0.1, 1.0], "svm_epochs": 10},
        "harness": {"trials": 2},
    }
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v) if isinstance(v, dict) else raw.__setitem__(k, v)
    return Config.from_dict(raw)
