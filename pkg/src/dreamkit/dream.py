"""Multi-discriminator adversarial embedding plus a domain-agnostic attribute classifier.

A shared generator maps fingerprints to 128-d embeddings, one discriminator
per source domain tries to tell its own domain's embeddings from the rest,
and a nine-head classifier predicts the attributes from the embeddings.
Training alternates discriminator steps with a joint generator/classifier
step (see :func:`train_epoch`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .config import DreamConfig
from .errors import IncompatibilityError, ValidationError
from .fingerprint import FingerprintSet
from .nn.functional import PROB_FLOOR, clamped_log
from .nn.layers import LayerSpec
from .zoo import ATTRIBUTE_NAMES, ATTRIBUTES, HEAD_SIZES, grid_hash

log = logging.getLogger(__name__)

_PHI, _GEN, _DISC, _BATCH = 1, 2, 3, 4


def _stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *extra])


def make_generator(in_dim: int, cfg: DreamConfig, rng: np.random.Generator) -> nn.Sequential:
    specs = [LayerSpec("dense", in_features=in_dim, out_features=cfg.gen_hidden),
             LayerSpec("activation", activation="relu"),
             LayerSpec("dense", in_features=cfg.gen_hidden, out_features=cfg.embed_dim)]
    return nn.Sequential.from_specs(specs, rng, init=("normal", cfg.init_std))


def make_discriminator(cfg: DreamConfig, rng: np.random.Generator) -> nn.Sequential:
    h1, h2 = cfg.disc_hidden
    specs = [LayerSpec("dense", in_features=cfg.embed_dim, out_features=h1),
             LayerSpec("activation", activation="relu"),
             LayerSpec("dense", in_features=h1, out_features=h2),
             LayerSpec("activation", activation="relu"),
             LayerSpec("dense", in_features=h2, out_features=1),
             LayerSpec("activation", activation="sigmoid")]
    return nn.Sequential.from_specs(specs, rng, init=("normal", cfg.init_std))


class ReverseClassifier:
    """Shared dense trunk followed by one softmax head per attribute."""

    def __init__(self, in_dim: int, width: int, rng: np.random.Generator, init=("normal", 0.02),
                 head_sizes: Sequence[int] = HEAD_SIZES) -> None:
        self.in_dim = in_dim
        self.head_sizes = tuple(head_sizes)
        self.trunk = nn.Sequential.from_specs(
            [LayerSpec("dense", in_features=in_dim, out_features=width),
             LayerSpec("activation", activation="relu")], rng, init)
        self.heads = [nn.Sequential.from_specs([LayerSpec("dense", in_features=width, out_features=k)], rng, init)
                      for k in self.head_sizes]

    def networks(self) -> list[nn.Sequential]:
        return [self.trunk, *self.heads]

    def params(self) -> list[np.ndarray]:
        return [p for net in self.networks() for p in net.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for net in self.networks() for g in net.grads()]

    def features(self, z: np.ndarray) -> np.ndarray:
        return self.trunk.forward(z)

    def forward(self, z: np.ndarray) -> list[np.ndarray]:
        h = self.trunk.forward(z)
        return [head.forward(h) for head in self.heads]

    def predict_proba(self, z: np.ndarray) -> list[np.ndarray]:
        return [nn.softmax(logits, axis=1) for logits in self.forward(z)]

    def loss(self, z: np.ndarray, labels: np.ndarray, extra_feature_grad=None) -> tuple[float, np.ndarray]:
        """Mean over rows of the summed per-head cross-entropy.

        Runs the backward pass too: fills parameter grads and returns
        ``(loss, d loss / d z)``. ``extra_feature_grad(h)`` may return
        ``(value, d value / d h)`` for a penalty on the trunk features,
        added to the returned loss.
        """
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (z.shape[0], len(self.heads)):
            raise ValidationError(f"labels shape {labels.shape}, expected ({z.shape[0]}, {len(self.heads)})")
        for a, k in enumerate(self.head_sizes):
            if labels[:, a].min(initial=0) < 0 or labels[:, a].max(initial=0) >= k:
                raise ValidationError(f"label outside value set of head {a}")
        h = self.trunk.forward(z)
        total = 0.0
        dh = np.zeros_like(h)
        for a, head in enumerate(self.heads):
            l, _, dlogits = nn.softmax_cross_entropy(head.forward(h), labels[:, a])
            total += l
            dh += head.backward(dlogits)
        if extra_feature_grad is not None:
            value, dpen = extra_feature_grad(h)
            total += value
            dh += dpen
        dz = self.trunk.backward(dh)
        return total, dz

    def state_dict(self, prefix: str = "phi") -> dict[str, np.ndarray]:
        out = {f"{prefix}.trunk.{k}": v for k, v in self.trunk.state_dict().items()}
        for a, head in enumerate(self.heads):
            out.update({f"{prefix}.head{a}.{k}": v for k, v in head.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "phi") -> None:
        def part(p):
            return {k[len(p) + 1:]: v for k, v in state.items() if k.startswith(p + ".")}
        self.trunk.load_state_dict(part(f"{prefix}.trunk"))
        for a, head in enumerate(self.heads):
            head.load_state_dict(part(f"{prefix}.head{a}"))


def classifier_loss(phi: ReverseClassifier, z: np.ndarray, labels: np.ndarray) -> float:
    return phi.loss(z, labels)[0]


# ---------------------------------------------------------------------------
# adversarial pieces


def partition_true_false(batches: Sequence[np.ndarray], i: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rows of domain ``i`` are True; the rows of every other domain are False."""
    m = len(batches)
    if m < 2:
        raise ValidationError("need at least two domains to form a False set")
    if not 0 <= i < m:
        raise ValidationError(f"domain index {i} outside [0, {m})")
    return batches[i], [batches[j] for j in range(m) if j != i]


def discriminator_loss(disc: nn.Sequential, z_true: np.ndarray, z_false: np.ndarray,
                       backward: bool = True) -> float:
    """``-[sum log D(z_true) + sum log(1 - D(z_false))]``; fills ``disc`` grads."""
    z = np.concatenate([z_true, z_false])
    d = disc.forward(z)[:, 0]
    nt = len(z_true)
    loss = -(np.sum(clamped_log(d[:nt])) + np.sum(clamped_log(1.0 - d[nt:])))
    if backward:
        dd = np.zeros_like(d)
        lo, hi = PROB_FLOOR, 1.0 - PROB_FLOOR
        t, f = d[:nt], d[nt:]
        dd[:nt] = np.where((t > lo) & (t < hi), -1.0 / t, 0.0)
        dd[nt:] = np.where((f > lo) & (f < hi), 1.0 / (1.0 - f), 0.0)
        disc.backward(dd[:, None])
    return float(loss)


def generator_adversarial_loss(discs: Sequence[nn.Sequential], z_by_domain: Sequence[np.ndarray],
                               non_saturating: bool = False) -> tuple[float, list[np.ndarray]]:
    """Adversarial term for the generator and its gradient wrt each domain's embeddings.

    Default: ``sum_i sum_{x in False_i} log(1 - D_i(z))`` (minimised).
    ``non_saturating``: ``-sum_i sum_{x in False_i} log D_i(z)``.
    Discriminator parameters are not updated here.
    """
    m = len(z_by_domain)
    if len(discs) != m:
        raise ValidationError(f"{len(discs)} discriminators for {m} domains")
    dz = [np.zeros_like(z) for z in z_by_domain]
    total = 0.0
    lo, hi = PROB_FLOOR, 1.0 - PROB_FLOOR
    for i, disc in enumerate(discs):
        _, false_sets = partition_true_false(z_by_domain, i)
        others = [j for j in range(m) if j != i]
        z = np.concatenate(false_sets)
        d = disc.forward(z)[:, 0]
        inside = (d > lo) & (d < hi)
        if non_saturating:
            total += -float(np.sum(clamped_log(d)))
            dd = np.where(inside, -1.0 / d, 0.0)
        else:
            total += float(np.sum(clamped_log(1.0 - d)))
            dd = np.where(inside, -1.0 / (1.0 - d), 0.0)
        g = disc.backward(dd[:, None], param_grads=False)
        start = 0
        for j in others:
            k = len(z_by_domain[j])
            dz[j] += g[start:start + k]
            start += k
    return total, dz


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochMetrics:
    disc_losses: list[float]
    adv_loss: float
    cls_loss: float


@dataclass
class DreamState:
    """Everything :func:`train_epoch` mutates."""

    cfg: DreamConfig
    domains: list[str]
    in_dim: int
    phi: ReverseClassifier
    gen: nn.Sequential | None
    discs: list[nn.Sequential]
    opt_phi: nn.Optimizer
    opt_gen: nn.Optimizer | None
    opt_discs: list[nn.Optimizer]
    batch_rng: np.random.Generator
    history: list[EpochMetrics] = field(default_factory=list)

    def embed(self, x: np.ndarray) -> np.ndarray:
        return x if self.gen is None else self.gen.forward(x)


def init_state(in_dim: int, domains: Sequence[str], cfg: DreamConfig, seed: int) -> DreamState:
    """Normal(0, init_std) init; each network draws from its own seeded stream.

    With ``cfg.use_discriminators`` off the generator is bypassed and the
    classifier reads raw fingerprints.
    """
    cfg.validate()
    domains = list(domains)
    if cfg.use_discriminators and len(domains) < 2:
        raise ValidationError("adversarial training needs at least two source domains")
    init = ("normal", cfg.init_std)
    if cfg.use_discriminators:
        gen = make_generator(in_dim, cfg, _stream(seed, _GEN))
        discs = [make_discriminator(cfg, _stream(seed, _DISC, i)) for i in range(len(domains))]
        phi_in = cfg.embed_dim
    else:
        gen, discs, phi_in = None, [], in_dim
    phi = ReverseClassifier(phi_in, cfg.trunk_width, _stream(seed, _PHI), init)
    return DreamState(
        cfg=cfg, domains=domains, in_dim=in_dim, phi=phi, gen=gen, discs=discs,
        opt_phi=nn.Adam(phi.params(), cfg.beta),
        opt_gen=nn.Adam(gen.params(), cfg.alpha) if gen is not None else None,
        opt_discs=[nn.Adam(d.params(), cfg.alpha) for d in discs],
        batch_rng=_stream(seed, _BATCH))


def sample_batches(rng: np.random.Generator, per_domain: Sequence[np.ndarray], b: int) -> list[np.ndarray]:
    """``b`` row indices per domain; with replacement only if a domain has fewer than ``b`` rows."""
    out = []
    for rows in per_domain:
        if len(rows) == 0:
            raise ValidationError("a source domain has no training fingerprints")
        replace_ = len(rows) < b
        if replace_:
            log.info("domain with %d rows < batch %d: sampling with replacement", len(rows), b)
        out.append(rows[rng.choice(len(rows), size=b, replace=replace_)])
    return out


def train_epoch(state: DreamState, x: np.ndarray, y: np.ndarray, per_domain: Sequence[np.ndarray]) -> EpochMetrics:
    """One iteration of the alternating scheme.

    1. draw ``b`` fingerprints per domain;
    2. for each domain ``i`` in ascending order, step D_i on
       ``-[sum_True log D_i(G(x)) + sum_False log(1 - D_i(G(x)))]`` with lr alpha;
    3. pool all rows, step the classifier on the mean cross-entropy with lr
       beta and the generator on ``adv + lam * sum CE`` with lr alpha.
    """
    cfg = state.cfg
    idx = sample_batches(state.batch_rng, per_domain, cfg.batch_size)
    xb = [x[i] for i in idx]
    x_all = np.concatenate(xb)
    y_all = np.concatenate([y[i] for i in idx])
    sizes = [len(i) for i in idx]
    bounds = np.cumsum([0] + sizes)

    disc_losses = []
    if state.gen is not None:
        z_all = state.gen.forward(x_all)
        z_dom = [z_all[bounds[j]:bounds[j + 1]] for j in range(len(sizes))]
        for i, (disc, opt) in enumerate(zip(state.discs, state.opt_discs)):
            z_true, z_false = partition_true_false(z_dom, i)
            disc_losses.append(discriminator_loss(disc, z_true, np.concatenate(z_false)))
            opt.step(disc.grads())

    adv = 0.0
    if state.gen is None:
        cls_loss, _ = state.phi.loss(x_all, y_all)
        state.opt_phi.step(state.phi.grads())
    else:
        # the discriminator steps leave G untouched, so z_all and G's cache are still current
        cls_loss, dz_cls = state.phi.loss(z_all, y_all)
        grad_c = [g.copy() for g in state.phi.grads()]
        adv, dz_adv = generator_adversarial_loss(state.discs, z_dom, cfg.non_saturating)
        # dz_cls is the gradient of the mean CE; the generator term uses the sum over all rows
        dz = np.concatenate(dz_adv) + cfg.lam * len(x_all) * dz_cls
        state.gen.backward(dz)
        state.opt_phi.step(grad_c)
        state.opt_gen.step(state.gen.grads())
    metrics = EpochMetrics(disc_losses, adv, cls_loss)
    state.history.append(metrics)
    return metrics


def domain_rows(fps: FingerprintSet, domains: Sequence[str]) -> list[np.ndarray]:
    tags = np.array(fps.domains())
    return [np.flatnonzero(tags == d) for d in domains]


@dataclass
class DreamPipeline:
    """A trained generator + classifier (+ discriminators) bound to its (C, N, m, grid)."""

    state: DreamState
    n_classes: int
    n_queries: int
    seed: int
    kind: str = "dream"

    @property
    def cfg(self) -> DreamConfig:
        return self.state.cfg

    @property
    def m(self) -> int:
        return len(self.state.domains)

    def check_compatible(self, fps: FingerprintSet) -> None:
        if (fps.n_classes, fps.n_queries) != (self.n_classes, self.n_queries):
            raise IncompatibilityError(
                f"fingerprints have (C, N) = ({fps.n_classes}, {fps.n_queries}); pipeline was trained "
                f"for ({self.n_classes}, {self.n_queries})")

    def embed(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_classes * self.n_queries:
            raise IncompatibilityError(
                f"fingerprint length {x.shape[1]} != C*N = {self.n_classes * self.n_queries}; "
                "query set or class count differs from training")
        return self.state.embed(x)

    def predict_proba(self, x: np.ndarray) -> list[np.ndarray]:
        return self.state.phi.predict_proba(self.embed(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.stack([np.argmax(p, axis=1) for p in self.predict_proba(x)], axis=1)

    def infer_attributes(self, vector: np.ndarray) -> tuple[dict[str, object], dict[str, np.ndarray]]:
        """Predicted value and probability vector per attribute for one fingerprint."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1:
            raise ValidationError("expected a single fingerprint vector")
        probs = [p[0] for p in self.predict_proba(vector[None, :])]
        values = {name: vals[int(np.argmax(p))] for (name, vals), p in zip(ATTRIBUTES, probs)}
        return values, dict(zip(ATTRIBUTE_NAMES, probs))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.state.phi.state_dict()
        if self.state.gen is not None:
            out.update({f"gen.{k}": v for k, v in self.state.gen.state_dict().items()})
        for i, d in enumerate(self.state.discs):
            out.update({f"disc{i}.{k}": v for k, v in d.state_dict().items()})
        return out

    def meta(self) -> dict:
        return {"kind": self.kind, "C": self.n_classes, "N": self.n_queries, "m": self.m,
                "grid": grid_hash(), "domains": self.state.domains, "seed": self.seed,
                "config": self.cfg.__dict__ | {"lambda_grid": list(self.cfg.lambda_grid),
                                                "disc_hidden": list(self.cfg.disc_hidden)}}

    def save(self, path: str | Path) -> None:
        nn.checkpoint.save(path, self.state_dict(), self.meta())

    @classmethod
    def load(cls, path: str | Path, expect: FingerprintSet | None = None) -> "DreamPipeline":
        arrays, meta = nn.checkpoint.load(path)
        if meta.get("grid") != grid_hash():
            raise IncompatibilityError(f"{path}: attribute grid hash {meta.get('grid')} != {grid_hash()}")
        raw = dict(meta["config"])
        raw["lambda_grid"] = tuple(raw["lambda_grid"])
        raw["disc_hidden"] = tuple(raw["disc_hidden"])
        cfg = DreamConfig(**raw)
        state = init_state(meta["C"] * meta["N"], meta["domains"], cfg, meta["seed"])
        pipe = cls(state, meta["C"], meta["N"], meta["seed"], meta["kind"])
        state.phi.load_state_dict(arrays)
        if state.gen is not None:
            state.gen.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("gen.")})
        for i, d in enumerate(state.discs):
            p = f"disc{i}."
            d.load_state_dict({k[len(p):]: v for k, v in arrays.items() if k.startswith(p)})
        if expect is not None:
            pipe.check_compatible(expect)
            if expect.m != pipe.m:
                raise IncompatibilityError(f"fingerprints declare m={expect.m}, pipeline has m={pipe.m}")
        return pipe


def train_dream(train: FingerprintSet, cfg: DreamConfig, seed: int, epochs: int | None = None,
                callback=None) -> DreamPipeline:
    """Train on labelled source-domain fingerprints for ``epochs`` iterations."""
    if len(train) == 0:
        raise ValidationError("empty training fingerprint set")
    domains = sorted(set(train.domains()))
    x, y = train.matrix(), train.labels()
    state = init_state(x.shape[1], domains, cfg, seed)
    per_domain = domain_rows(train, domains)
    for epoch in range(cfg.epochs if epochs is None else epochs):
        metrics = train_epoch(state, x, y, per_domain)
        if callback is not None:
            callback(epoch, metrics, state)
    return DreamPipeline(state, train.n_classes, train.n_queries, seed)


def mean_attribute_accuracy(pipe: DreamPipeline, fps: FingerprintSet) -> float:
    if len(fps) == 0:
        raise ValidationError("empty validation set")
    return float(np.mean(pipe.predict(fps.matrix()) == fps.labels()))


def select_lambda(train: FingerprintSet, val: FingerprintSet, cfg: DreamConfig, seed: int,
                  grid: Sequence[float] | None = None,
                  epochs: int | None = None) -> tuple[float, DreamPipeline, dict[float, float]]:
    """Train once per distinct lambda (same seed); best mean validation accuracy wins, ties to smaller lambda."""
    if len(val) == 0:
        raise ValidationError("empty validation split")
    values = sorted(set(cfg.lambda_grid if grid is None else grid))
    if not values:
        raise ValidationError("empty lambda grid")
    scores, pipes = {}, {}
    for lam in values:
        pipe = train_dream(train, replace(cfg, lam=lam), seed, epochs)
        if len(values) == 1:
            return lam, pipe, {lam: float("nan")}
        scores[lam] = mean_attribute_accuracy(pipe, val)
        pipes[lam] = pipe
    best = max(values, key=lambda lam: (scores[lam], -lam))
    return best, pipes[best], scores
