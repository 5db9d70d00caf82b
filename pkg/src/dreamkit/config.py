"""Run configuration.

Every tunable constant lives here. A config file is JSON with one object per
section (``data``, ``zoo``, ``fingerprint``, ``dream``, ``baselines``,
``harness``) plus a top-level ``seed``; missing keys keep their defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ValidationError

LAMBDA_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)
FULL_SCALE_ALPHA = 1e-5
FULL_SCALE_BETA = 1e-4


@dataclass
class DataConfig:
    n_classes: int = 5
    side: int = 12
    samples_per_class: int = 200
    styles: tuple[str, ...] = ("clean", "invert_noise", "dilate")
    # per-class fractions of images used for white-box training / validation;
    # the rest forms the query pool
    train_fraction: float = 0.7
    val_fraction: float = 0.15


@dataclass
class ZooConfig:
    models_per_domain: int = 140
    split_ratios: tuple[int, int, int] = (5, 1, 1)
    disjoint_sizes: tuple[int, int, int] = (60, 20, 20)
    epochs: int = 6
    conv_channels: int = 8
    fc_width: int = 32
    dropout_rate: float = 0.1
    lr_sgd: float = 0.05
    lr_adam: float = 1e-3
    lr_rmsprop: float = 1e-3
    exclude_collapse: bool = True


@dataclass
class FingerprintConfig:
    n_queries: int = 20


@dataclass
class DreamConfig:
    # desk scale trains for 500 iterations, so both rates are 10x FULL_SCALE_ALPHA / FULL_SCALE_BETA
    alpha: float = 1e-4
    beta: float = 1e-3
    lam: float = 0.1
    batch_size: int = 100
    epochs: int = 500
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    embed_dim: int = 128
    gen_hidden: int = 500
    disc_hidden: tuple[int, int] = (512, 256)
    trunk_width: int = 256
    init_std: float = 0.02
    non_saturating: bool = False
    use_discriminators: bool = True

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ValidationError("batch size must be at least 2")


@dataclass
class BaselineConfig:
    # same classifier budget as DreamConfig (beta, epochs)
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 100
    gamma: float = 0.0
    gamma_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    bandwidth: float | None = None
    svm_lr: float = 0.01
    svm_epochs: int = 200
    svm_l2: float = 1e-3


@dataclass
class HarnessConfig:
    trials: int = 5
    methods: tuple[str, ...] = ("random", "svm", "kennen", "mmd", "dream")
    tune_lambda: bool = True
    tune_gamma: bool = True
    probe_C: float = 1.0


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    zoo: ZooConfig = field(default_factory=ZooConfig)
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    dream: DreamConfig = field(default_factory=DreamConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "Config":
        cfg = cls()
        for key, value in raw.items():
            if key == "seed":
                cfg.seed = int(value)
                continue
            section = getattr(cfg, key, None)
            if section is None or not dataclasses.is_dataclass(section):
                raise ValidationError(f"unknown config section {key!r}")
            names = {f.name: f for f in dataclasses.fields(section)}
            for k, v in value.items():
                if k not in names:
                    raise ValidationError(f"unknown config key {key}.{k}")
                if isinstance(v, list):
                    v = tuple(v)
                setattr(section, k, v)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path}: {exc}") from exc
        return cls.from_dict(raw)
