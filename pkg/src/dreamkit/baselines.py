"""Comparison methods: KENNEN* (plain reverse classifier), linear SVM, MMD-regularised classifier."""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .config import BaselineConfig, DreamConfig
from .dream import DreamPipeline, domain_rows, init_state, sample_batches
from .errors import IncompatibilityError, ValidationError
from .fingerprint import FingerprintSet
from .zoo import HEAD_SIZES, grid_hash


def _kernel(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    sq = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma * sigma))


def median_bandwidth(batches: Sequence[np.ndarray]) -> float:
    """Median pairwise Euclidean distance over the pooled rows."""
    pooled = np.concatenate(batches)
    sq = np.sum(pooled * pooled, 1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T, 0.0)
    iu = np.triu_indices(len(pooled), k=1)
    return float(np.sqrt(np.median(d2[iu])))


def _mmd_pair(x: np.ndarray, y: np.ndarray, sigma: float) -> tuple[float, np.ndarray, np.ndarray]:
    n, p = len(x), len(y)
    kxx, kyy, kxy = _kernel(x, x, sigma), _kernel(y, y, sigma), _kernel(x, y, sigma)
    value = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    s2 = sigma * sigma
    # d k(a, b) / d a = -k(a, b) (a - b) / sigma^2
    gx = (-2.0 / (n * n * s2)) * (x * kxx.sum(1)[:, None] - kxx @ x) \
        + (2.0 / (n * p * s2)) * (x * kxy.sum(1)[:, None] - kxy @ y)
    gy = (-2.0 / (p * p * s2)) * (y * kyy.sum(1)[:, None] - kyy @ y) \
        + (2.0 / (n * p * s2)) * (y * kxy.sum(0)[:, None] - kxy.T @ x)
    return float(value), gx, gy


def mmd_penalty(batches: Sequence[np.ndarray], bandwidth: float | None = None) -> tuple[float, list[np.ndarray]]:
    """Mean over domain pairs of the biased RBF-kernel MMD^2, with gradients per batch.

    ``bandwidth=None`` uses the median heuristic on the pooled rows; the
    bandwidth is treated as a constant for the gradient.
    """
    if len(batches) < 2 or any(len(b) < 2 for b in batches):
        raise ValidationError("MMD needs at least two domains with at least two rows each")
    sigma = median_bandwidth(batches) if bandwidth is None else float(bandwidth)
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValidationError(f"degenerate RBF bandwidth {sigma}")
    grads = [np.zeros_like(b) for b in batches]
    pairs = list(combinations(range(len(batches)), 2))
    total = 0.0
    for i, j in pairs:
        v, gi, gj = _mmd_pair(batches[i], batches[j], sigma)
        total += v
        grads[i] += gi
        grads[j] += gj
    k = len(pairs)
    return total / k, [g / k for g in grads]


def _reverse_config(arch: DreamConfig, cfg: BaselineConfig) -> DreamConfig:
    return replace(arch, beta=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs, lam=0.0,
                   use_discriminators=False)


def train_mmd(train: FingerprintSet, arch: DreamConfig, cfg: BaselineConfig, seed: int,
              gamma: float | None = None, epochs: int | None = None) -> DreamPipeline:
    """Reverse classifier on raw fingerprints, plus ``gamma * MMD`` between domains on trunk features.

    Batches hold ``b`` rows per domain (the same sampler the adversarial
    trainer uses); the loss itself ignores domain tags when ``gamma == 0``.
    """
    gamma = cfg.gamma if gamma is None else gamma
    if gamma < 0:
        raise ValidationError("MMD weight must be non-negative")
    if len(train) == 0:
        raise ValidationError("empty training set")
    domains = sorted(set(train.domains()))
    if gamma > 0 and len(domains) < 2:
        raise ValidationError("MMD baseline needs at least two domains")
    dcfg = _reverse_config(arch, cfg)
    x, y = train.matrix(), train.labels()
    state = init_state(x.shape[1], domains, dcfg, seed)
    per_domain = domain_rows(train, domains)
    for _ in range(dcfg.epochs if epochs is None else epochs):
        idx = sample_batches(state.batch_rng, per_domain, dcfg.batch_size)
        x_all = np.concatenate([x[i] for i in idx])
        y_all = np.concatenate([y[i] for i in idx])
        penalty = None
        if gamma > 0:
            bounds = np.cumsum([0] + [len(i) for i in idx])

            def penalty(h, bounds=bounds):
                parts = [h[bounds[k]:bounds[k + 1]] for k in range(len(bounds) - 1)]
                value, grads = mmd_penalty(parts, cfg.bandwidth)
                return gamma * value, gamma * np.concatenate(grads)
        state.phi.loss(x_all, y_all, penalty)
        state.opt_phi.step(state.phi.grads())
    return DreamPipeline(state, train.n_classes, train.n_queries, seed, kind="mmd" if gamma > 0 else "kennen")


def train_kennen(train: FingerprintSet, arch: DreamConfig, cfg: BaselineConfig, seed: int,
                 epochs: int | None = None) -> DreamPipeline:
    """Reverse classifier trained directly on fingerprints with cross-entropy only."""
    return train_mmd(train, arch, cfg, seed, gamma=0.0, epochs=epochs)


def between_domain_spread(features: np.ndarray, domains: Sequence[str]) -> float:
    """Trace of the covariance of per-domain feature means."""
    tags = np.asarray(domains)
    means = np.stack([features[tags == d].mean(axis=0) for d in sorted(set(domains))])
    return float(np.trace(np.atleast_2d(np.cov(means, rowvar=False, bias=True))))


# ---------------------------------------------------------------------------
# linear SVM


@dataclass
class LinearSVM:
    """One-vs-rest linear hinge classifiers, one block per attribute head."""

    weights: list[np.ndarray]  # per head: (d, k)
    biases: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray
    kind: str = "svm"

    def margins(self, x: np.ndarray) -> list[np.ndarray]:
        xs = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return [xs @ w + b for w, b in zip(self.weights, self.biases)]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.stack([np.argmax(m, axis=1) for m in self.margins(x)], axis=1)

    def check_compatible(self, fps: FingerprintSet) -> None:
        if fps.n_classes * fps.n_queries != len(self.mean):
            raise IncompatibilityError(f"fingerprint length {fps.n_classes * fps.n_queries} != "
                                       f"SVM input size {len(self.mean)}")

    def save(self, path: str | Path) -> None:
        arrays = {"mean": self.mean, "scale": self.scale}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"], arrays[f"b{i}"] = w, b
        nn.checkpoint.save(path, arrays, {"kind": "svm", "heads": len(self.weights), "grid": grid_hash()})

    @classmethod
    def load(cls, path: str | Path) -> "LinearSVM":
        arrays, meta = nn.checkpoint.load(path)
        if meta.get("kind") != "svm":
            raise IncompatibilityError(f"{path}: not an SVM checkpoint (kind={meta.get('kind')!r})")
        if meta.get("grid") != grid_hash():
            raise IncompatibilityError(f"{path}: attribute grid hash differs")
        k = meta["heads"]
        return cls([arrays[f"w{i}"] for i in range(k)], [arrays[f"b{i}"] for i in range(k)],
                   arrays["mean"], arrays["scale"])


def hinge_terms(margins: np.ndarray, signs: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - signs * margins)


def train_linear_svm(x: np.ndarray, y: np.ndarray, cfg: BaselineConfig, seed: int,
                     head_sizes: Sequence[int] = HEAD_SIZES, batch: int = 32) -> LinearSVM:
    """Minibatch subgradient descent on L2-regularised one-vs-rest hinge loss.

    Features are standardised with training statistics. Step size decays
    as ``svm_lr / sqrt(epoch + 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(len(x), -1)
    if len(x) == 0:
        raise ValidationError("empty training set")
    if y.shape[1] != len(head_sizes):
        raise ValidationError(f"labels have {y.shape[1]} heads, expected {len(head_sizes)}")
    for a in range(y.shape[1]):
        if len(np.unique(y[:, a])) < 2:
            raise ValidationError(f"head {a}: training labels contain a single class")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    xs = (x - mean) / scale
    rng = np.random.default_rng([seed, 5])
    n, d = xs.shape
    weights = [np.zeros((d, k)) for k in head_sizes]
    biases = [np.zeros(k) for k in head_sizes]
    signs = [np.where(y[:, a, None] == np.arange(k)[None, :], 1.0, -1.0) for a, k in enumerate(head_sizes)]
    for epoch in range(cfg.svm_epochs):
        lr = cfg.svm_lr / np.sqrt(epoch + 1.0)
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            xb = xs[idx]
            for a in range(len(head_sizes)):
                sg = signs[a][idx]
                active = (hinge_terms(xb @ weights[a] + biases[a], sg) > 0) * sg
                gw = -(xb.T @ active) / len(idx) + cfg.svm_l2 * weights[a]
                gb = -active.sum(axis=0) / len(idx)
                weights[a] -= lr * gw
                biases[a] -= lr * gb
    return LinearSVM(weights, biases, mean, scale)


class RandomGuess:
    """Uniform random attribute predictor; its expected accuracy is ``1 / |values|``."""

    kind = "random"

    def __init__(self, seed: int, head_sizes: Sequence[int] = HEAD_SIZES) -> None:
        self.rng = np.random.default_rng([seed, 6])
        self.head_sizes = tuple(head_sizes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        return np.stack([self.rng.integers(k, size=n) for k in self.head_sizes], axis=1)
