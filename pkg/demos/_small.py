"""Shared small configuration for the demo scripts (runs in about a minute)."""

from dreamkit.config import Config

SMALL = {
    "seed": 3,
    "data": {"samples_per_class": 60},
    "zoo": {"models_per_domain": 42, "epochs": 3, "disjoint_sizes": [18, 6, 6]},
    "dream": {"epochs": 300, "alpha": 1e-3, "beta": 1e-3, "batch_size": 30},
    "baselines": {"epochs": 300, "lr": 1e-3, "batch_size": 30},
    "harness": {"trials": 1},
}


def small_config() -> Config:
    return Config.from_dict(SMALL)
