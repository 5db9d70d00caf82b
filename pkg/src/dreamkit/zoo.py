"""White-box model zoo: attribute grid, architectures, synthetic domains, training, splits."""

from __future__ import annotations

import hashlib
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import nn
from .config import Config, DataConfig, ZooConfig
from .errors import NonFiniteError, ValidationError
from .nn.layers import LayerSpec

log = logging.getLogger(__name__)

# Attribute names and value sets in the row order of the attribute table.
ATTRIBUTES: tuple[tuple[str, tuple], ...] = (
    ("activation", ("relu", "prelu", "elu", "tanh")),
    ("dropout", (True, False)),
    ("maxpool", (True, False)),
    ("batchnorm", (True, False)),
    ("kernel_size", (3, 5)),
    ("n_conv", (2, 3, 4)),
    ("n_fc", (2, 3, 4)),
    ("optimizer", ("sgd", "adam", "rmsprop")),
    ("batch_size", (32, 64, 128)),
)
ATTRIBUTE_NAMES = tuple(name for name, _ in ATTRIBUTES)
HEAD_SIZES = tuple(len(values) for _, values in ATTRIBUTES)
GRID_SIZE = int(np.prod(HEAD_SIZES))

# Column order used by result tables.
REPORT_ORDER = ("activation", "dropout", "maxpool", "kernel_size", "n_conv", "n_fc",
                "optimizer", "batch_size", "batchnorm")
REPORT_LABELS = ("#act", "#drop", "#pool", "#ks", "#conv", "#fc", "#opt", "#bs", "#bn")


@dataclass(frozen=True, order=True)
class AttributeVector:
    activation: str
    dropout: bool
    maxpool: bool
    batchnorm: bool
    kernel_size: int
    n_conv: int
    n_fc: int
    optimizer: str
    batch_size: int

    def __post_init__(self) -> None:
        for name, values in ATTRIBUTES:
            if getattr(self, name) not in values:
                raise ValidationError(f"{name}={getattr(self, name)!r} not in {values}")

    def indices(self) -> tuple[int, ...]:
        return tuple(values.index(getattr(self, name)) for name, values in ATTRIBUTES)

    @classmethod
    def from_indices(cls, idx: Sequence[int]) -> "AttributeVector":
        return cls(*(values[i] for (_, values), i in zip(ATTRIBUTES, idx)))

    def tokens(self) -> list[str]:
        return [attr_token(getattr(self, name)) for name in ATTRIBUTE_NAMES]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "AttributeVector":
        if len(tokens) != len(ATTRIBUTES):
            raise ValidationError(f"expected {len(ATTRIBUTES)} attribute tokens, got {len(tokens)}")
        vals = []
        for (name, values), tok in zip(ATTRIBUTES, tokens):
            lookup = {attr_token(v): v for v in values}
            if tok not in lookup:
                raise ValidationError(f"bad token {tok!r} for attribute {name}")
            vals.append(lookup[tok])
        return cls(*vals)


def attr_token(value) -> str:
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value)


def enumerate_grid(restrict: Mapping[str, Sequence] | None = None) -> list[AttributeVector]:
    """All attribute combinations in lexicographic order of value indices.

    The first attribute varies slowest. ``restrict`` narrows any attribute
    to a subset of its values (kept in table order).
    """
    restrict = dict(restrict or {})
    unknown = set(restrict) - set(ATTRIBUTE_NAMES)
    if unknown:
        raise ValidationError(f"unknown attributes {sorted(unknown)}")
    axes = []
    for name, values in ATTRIBUTES:
        if name in restrict:
            allowed = set(restrict[name])
            axes.append(tuple(v for v in values if v in allowed))
        else:
            axes.append(values)
    return [AttributeVector(*combo) for combo in itertools.product(*axes)]


def grid_hash() -> str:
    desc = ";".join(f"{n}={','.join(attr_token(v) for v in vals)}" for n, vals in ATTRIBUTES)
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


def spatial_sizes(attr: AttributeVector, side: int) -> list[int]:
    sizes = [side]
    for _ in range(attr.n_conv):
        sizes.append(sizes[-1] // 2 if attr.maxpool else sizes[-1])
    return sizes


def collapses(attr: AttributeVector, side: int) -> bool:
    return min(spatial_sizes(attr, side)) < 1


def build_model(attr: AttributeVector, n_classes: int, side: int, in_channels: int = 1,
                conv_channels: int = 8, fc_width: int = 32, dropout_rate: float = 0.1) -> list[LayerSpec]:
    """Layer list for one white-box classifier.

    Conv block: conv k x k, [batchnorm], [maxpool 2], activation.
    FC block: dense, activation, [dropout]. Then a linear classifier.
    """
    sizes = spatial_sizes(attr, side)
    if min(sizes) < 1:
        raise ValidationError(
            f"spatial collapse: {attr.n_conv} pooled conv blocks on {side}x{side} "
            f"gives sizes {'->'.join(map(str, sizes))}")
    specs: list[LayerSpec] = []
    ch = in_channels
    for _ in range(attr.n_conv):
        specs.append(LayerSpec("conv2d", in_features=ch, out_features=conv_channels,
                               kernel_size=attr.kernel_size))
        if attr.batchnorm:
            specs.append(LayerSpec("batchnorm", in_features=conv_channels))
        if attr.maxpool:
            specs.append(LayerSpec("maxpool", window=2))
        specs.append(LayerSpec("activation", activation=attr.activation))
        ch = conv_channels
    specs.append(LayerSpec("flatten"))
    width = ch * sizes[-1] * sizes[-1]
    for _ in range(attr.n_fc):
        specs.append(LayerSpec("dense", in_features=width, out_features=fc_width))
        specs.append(LayerSpec("activation", activation=attr.activation))
        if attr.dropout:
            specs.append(LayerSpec("dropout", rate=dropout_rate))
        width = fc_width
    specs.append(LayerSpec("dense", in_features=width, out_features=n_classes))
    return specs


# ---------------------------------------------------------------------------
# seeds

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(global_seed: int, index: int) -> int:
    """Per-model seed: splitmix64(splitmix64(global_seed) ^ index), kept to 63 bits."""
    return splitmix64(splitmix64(global_seed) ^ index) >> 1


# ---------------------------------------------------------------------------
# synthetic domains

STYLES = ("clean", "invert_noise", "dilate")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    n_classes: int
    side: int
    style: str
    samples_per_class: int

    def __post_init__(self) -> None:
        if self.style not in STYLES:
            raise ValidationError(f"unknown style {self.style!r}; choose from {STYLES}")


@dataclass
class DomainData:
    spec: DomainSpec
    images: np.ndarray  # (n, 1, side, side)
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    query_idx: np.ndarray


def default_domain_specs(cfg: DataConfig) -> list[DomainSpec]:
    return [DomainSpec(f"d{i}", cfg.n_classes, cfg.side, style, cfg.samples_per_class)
            for i, style in enumerate(cfg.styles)]


def _class_prototypes(rng: np.random.Generator, n_classes: int, side: int,
                      strokes: int = 3) -> np.ndarray:
    lo, hi = 1.5, side - 2.5
    return rng.uniform(lo, hi, size=(n_classes, strokes, 2, 2))


def _rasterize(segments: np.ndarray, side: int) -> np.ndarray:
    canvas = np.zeros((side, side))
    for (r0, c0), (r1, c1) in segments:
        n = int(max(abs(r1 - r0), abs(c1 - c0)) * 2) + 2
        rr = np.clip(np.rint(np.linspace(r0, r1, n)).astype(int), 0, side - 1)
        cc = np.clip(np.rint(np.linspace(c0, c1, n)).astype(int), 0, side - 1)
        canvas[rr, cc] = 1.0
    return canvas


def _apply_style(canvas: np.ndarray, style: str, rng: np.random.Generator) -> np.ndarray:
    if style == "clean":
        img = canvas + rng.normal(0.0, 0.05, canvas.shape)
    elif style == "invert_noise":
        img = 1.0 - canvas + rng.normal(0.0, 0.15, canvas.shape)
    else:
        img = 0.8 * ndimage.grey_dilation(canvas, size=(2, 2)) + 0.1 + rng.normal(0.0, 0.05, canvas.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic_domains(seed: int, specs: Sequence[DomainSpec],
                          train_fraction: float = 0.7, val_fraction: float = 0.15) -> dict[str, DomainData]:
    """Labelled image sets, one per domain, sharing class prototypes.

    Each class is a fixed set of strokes; every sample jitters and shifts
    them and the domain's style (clean, inverted + noise, dilated) decides
    pixel statistics. Output is a pure function of ``seed`` and ``specs``.
    """
    if len(specs) < 2:
        raise ValidationError("need at least two domains")
    if len({s.n_classes for s in specs}) != 1 or len({s.side for s in specs}) != 1:
        raise ValidationError("all domains must share class count and image side")
    n_classes, side = specs[0].n_classes, specs[0].side
    protos = _class_prototypes(np.random.default_rng([seed, 0]), n_classes, side)
    out = {}
    for d, spec in enumerate(specs):
        rng = np.random.default_rng([seed, d + 1])
        n = spec.samples_per_class * n_classes
        images = np.empty((n, 1, side, side))
        labels = np.repeat(np.arange(n_classes), spec.samples_per_class)
        for i, c in enumerate(labels):
            seg = protos[c] + rng.normal(0.0, 0.6, protos[c].shape)
            seg = seg + rng.integers(-1, 2, size=2)
            images[i, 0] = _apply_style(_rasterize(seg, side), spec.style, rng)
        n_tr = int(round(spec.samples_per_class * train_fraction))
        n_va = int(round(spec.samples_per_class * val_fraction))
        tr, va, qu = [], [], []
        for c in range(n_classes):
            idx = rng.permutation(np.flatnonzero(labels == c))
            tr.append(idx[:n_tr])
            va.append(idx[n_tr:n_tr + n_va])
            qu.append(idx[n_tr + n_va:])
        out[spec.domain_id] = DomainData(spec, images, labels, np.sort(np.concatenate(tr)),
                                         np.sort(np.concatenate(va)), np.sort(np.concatenate(qu)))
    return out


# ---------------------------------------------------------------------------
# records and zoo


@dataclass
class ModelRecord:
    model_id: str
    domain: str
    attrs: AttributeVector
    seed: int
    val_acc: float = float("nan")
    split: str = "unused"
    checkpoint: str = ""
    status: str = "planned"


@dataclass
class ModelZoo:
    records: list[ModelRecord]
    domains: list[str]
    global_seed: int
    n_classes: int
    side: int
    grid: str = field(default_factory=grid_hash)
    classes: tuple[int, ...] | None = None  # training-class subset; None means all

    def __post_init__(self) -> None:
        if len(self.domains) < 2:
            raise ValidationError("a zoo needs at least two domains")
        if self.classes is not None:
            if not self.classes or any(not 0 <= c < self.n_classes for c in self.classes):
                raise ValidationError(f"class subset {self.classes} invalid for C={self.n_classes}")

    @property
    def m(self) -> int:
        return len(self.domains)

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.classes is None else len(self.classes)

    def by_domain(self, domain: str, split: str | None = None) -> list[ModelRecord]:
        return [r for r in self.records if r.domain == domain and (split is None or r.split == split)]

    def record(self, model_id: str) -> ModelRecord:
        for r in self.records:
            if r.model_id == model_id:
                return r
        raise KeyError(model_id)


def valid_grid(side: int, exclude_collapse: bool = True) -> list[AttributeVector]:
    grid = enumerate_grid()
    return [a for a in grid if not (exclude_collapse and collapses(a, side))]


def plan_zoo(domains: Sequence[str], per_domain: int, global_seed: int, n_classes: int, side: int,
             exclude_collapse: bool = True, pool: Sequence[AttributeVector] | None = None) -> ModelZoo:
    """Sample attribute vectors uniformly; model ``k`` gets seed ``derive_seed(global_seed, k)``."""
    grid = list(pool) if pool is not None else valid_grid(side, exclude_collapse)
    records = []
    k = 0
    for d in domains:
        for j in range(per_domain):
            seed = derive_seed(global_seed, k)
            attrs = grid[int(np.random.default_rng(seed).integers(len(grid)))]
            records.append(ModelRecord(f"{d}-{j:05d}", d, attrs, seed))
            k += 1
    return ModelZoo(records, list(domains), global_seed, n_classes, side)


def _model_lr(cfg: ZooConfig, optimizer: str) -> float:
    return {"sgd": cfg.lr_sgd, "adam": cfg.lr_adam, "rmsprop": cfg.lr_rmsprop}[optimizer]


def make_network(attrs: AttributeVector, n_classes: int, side: int, cfg: ZooConfig,
                 seed: int) -> nn.Sequential:
    specs = build_model(attrs, n_classes, side, conv_channels=cfg.conv_channels,
                        fc_width=cfg.fc_width, dropout_rate=cfg.dropout_rate)
    return nn.Sequential.from_specs(specs, np.random.default_rng([seed, 1]))


def accuracy(net: nn.Sequential, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    correct = 0
    for s in range(0, len(x), batch):
        correct += int(np.sum(np.argmax(net.forward(x[s:s + batch], train=False), axis=1) == y[s:s + batch]))
    return correct / len(x)


def _restrict(data: DomainData, idx: np.ndarray, classes: Sequence[int] | None) -> tuple[np.ndarray, np.ndarray]:
    x, y = data.images[idx], data.labels[idx]
    if classes is None:
        return x, y
    keep = np.isin(y, classes)
    remap = {c: i for i, c in enumerate(classes)}
    return x[keep], np.array([remap[c] for c in y[keep]], dtype=np.int64)


def train_model(record: ModelRecord, data: DomainData, n_classes: int, side: int, cfg: ZooConfig,
                epochs: int | None = None,
                classes: Sequence[int] | None = None) -> tuple[nn.Sequential, float, str]:
    """Train one white-box model; returns (network, validation accuracy, status).

    All randomness (init, shuffling, dropout) derives from ``record.seed``.
    On a non-finite loss the last finite epoch's weights are kept and the
    status is ``"nonfinite"``. With ``classes`` the model only sees (and
    outputs) that class subset.
    """
    epochs = cfg.epochs if epochs is None else epochs
    attrs = record.attrs
    n_out = n_classes if classes is None else len(classes)
    net = make_network(attrs, n_out, side, cfg, record.seed)
    rng = np.random.default_rng([record.seed, 2])
    net.set_rng(rng)
    opt = nn.make_optimizer(attrs.optimizer, net.params(), _model_lr(cfg, attrs.optimizer))
    x, y = _restrict(data, data.train_idx, classes)
    status = "ok"
    for _ in range(epochs):
        snapshot = {k: v.copy() for k, v in net.state_dict().items()}
        try:
            order = rng.permutation(len(x))
            for s in range(0, len(x), attrs.batch_size):
                idx = order[s:s + attrs.batch_size]
                if len(idx) < 2 and attrs.batchnorm:
                    continue
                logits = net.forward(x[idx], train=True)
                loss, _, dlogits = nn.softmax_cross_entropy(logits, y[idx])
                if not np.isfinite(loss):
                    raise NonFiniteError("non-finite training loss")
                net.backward(dlogits, input_grad=False)
                opt.step(net.grads())
        except NonFiniteError:
            net.load_state_dict(snapshot)
            status = "nonfinite"
            log.warning("model %s hit a non-finite loss; keeping last finite weights", record.model_id)
            break
    val = accuracy(net, *_restrict(data, data.val_idx, classes))
    return net, val, status


def _train_one(args) -> tuple[str, float, str, bytes]:
    record, data, n_classes, side, cfg, epochs, classes = args
    net, val, status = train_model(record, data, n_classes, side, cfg, epochs, classes)
    blob = nn.checkpoint.dumps(net.state_dict(), {"model_id": record.model_id, "kind": "whitebox"})
    return record.model_id, val, status, blob


def train_zoo(zoo: ModelZoo, datasets: Mapping[str, DomainData], cfg: ZooConfig, out_dir: str | Path,
              epochs: int | None = None, jobs: int = 1, order: Sequence[int] | None = None) -> ModelZoo:
    """Train every planned model and write ``<out_dir>/models/<id>.ckpt``.

    ``order`` permutes training order (results do not depend on it).
    """
    out_dir = Path(out_dir)
    (out_dir / "models").mkdir(parents=True, exist_ok=True)
    idx = list(order) if order is not None else list(range(len(zoo.records)))
    tasks = [(zoo.records[i], datasets[zoo.records[i].domain], zoo.n_classes, zoo.side, cfg, epochs,
              zoo.classes) for i in idx]
    if jobs > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(jobs) as p:
            results = p.map(_train_one, tasks)
    else:
        results = map(_train_one, tasks)
    by_id = {}
    for model_id, val, status, blob in results:
        path = out_dir / "models" / f"{model_id}.ckpt"
        path.write_bytes(blob)
        by_id[model_id] = (val, status, str(path.relative_to(out_dir)))
    records = []
    for r in zoo.records:
        if r.model_id in by_id:
            val, status, ck = by_id[r.model_id]
            r = replace(r, val_acc=val, status=status, checkpoint=ck)
        records.append(r)
    return replace(zoo, records=records)


def load_network(record: ModelRecord, zoo: ModelZoo, cfg: ZooConfig, root: str | Path) -> nn.Sequential:
    net = make_network(record.attrs, zoo.n_outputs, zoo.side, cfg, record.seed)
    arrays, _ = nn.checkpoint.load(Path(root) / record.checkpoint)
    net.load_state_dict(arrays)
    return net


# ---------------------------------------------------------------------------
# splits


def split_zoo(zoo: ModelZoo, ratios: Sequence[int] = (5, 1, 1), sizes: Sequence[int] | None = None,
              seed: int = 0) -> ModelZoo:
    """Per-domain disjoint train/val/test split.

    Sizes default to ``floor(n * r / sum(ratios))``; explicit ``sizes``
    sample a subset and leave the remainder ``unused``.
    """
    rng = np.random.default_rng([seed, 7])
    tags = {}
    for d in zoo.domains:
        recs = [r for r in zoo.records if r.domain == d]
        n = len(recs)
        if sizes is None:
            total = sum(ratios)
            want = [n * r // total for r in ratios]
        else:
            want = list(sizes)
        if sum(want) > n:
            raise ValidationError(f"domain {d}: {n} models cannot fill splits {want}")
        perm = rng.permutation(n)
        start = 0
        for tag, k in zip(("train", "val", "test"), want):
            for i in perm[start:start + k]:
                tags[recs[i].model_id] = tag
            start += k
    return replace(zoo, records=[replace(r, split=tags.get(r.model_id, "unused")) for r in zoo.records])


def split_sizes(n: int, ratios: Sequence[int]) -> list[int]:
    total = sum(ratios)
    return [n * r // total for r in ratios]


def disjoint_attribute_split(zoo: ModelZoo, sizes: Sequence[int], seed: int = 0) -> ModelZoo:
    """Split so that train, val and test share no attribute combination.

    The combinations present in the zoo are shuffled and dealt into three
    pools in proportion to ``sizes``; each domain then takes up to
    ``sizes[s]`` of its models from pool ``s``.
    """
    if any(s < 0 for s in sizes) or len(sizes) != 3:
        raise ValidationError("sizes must be three non-negative counts")
    if max(sizes) > GRID_SIZE or sum(sizes) > GRID_SIZE:
        raise ValidationError(f"requested {list(sizes)} distinct combinations but the grid has {GRID_SIZE}")
    combos = sorted({r.attrs for r in zoo.records})
    if sum(sizes) > len(combos):
        raise ValidationError(f"zoo has {len(combos)} distinct combinations, {sum(sizes)} requested")
    rng = np.random.default_rng([seed, 11])
    perm = [combos[i] for i in rng.permutation(len(combos))]
    total = sum(sizes)
    bounds = np.cumsum([0] + [int(round(len(perm) * s / total)) for s in sizes[:-1]])
    pools = [set(perm[bounds[0]:bounds[1]]), set(perm[bounds[1]:bounds[2]]), set(perm[bounds[2]:])]
    tags = {}
    for d in zoo.domains:
        recs = [zoo.records[i] for i in rng.permutation(len(zoo.records)) if zoo.records[i].domain == d]
        for tag, pool, k in zip(("train", "val", "test"), pools, sizes):
            chosen = [r for r in recs if r.attrs in pool][:k]
            if len(chosen) < k:
                raise ValidationError(f"domain {d}: only {len(chosen)} models available for {tag}, need {k}")
            for r in chosen:
                tags[r.model_id] = tag
    return replace(zoo, records=[replace(r, split=tags.get(r.model_id, "unused")) for r in zoo.records])


# ---------------------------------------------------------------------------
# manifest

MANIFEST_MAGIC = "DREAMZOO 1"
MANIFEST_COLUMNS = ("model_id", "domain", *ATTRIBUTE_NAMES, "seed", "val_acc", "split", "status",
                    "checkpoint")


def write_manifest(path: str | Path, zoo: ModelZoo) -> None:
    classes = "all" if zoo.classes is None else ",".join(map(str, zoo.classes))
    lines = [f"{MANIFEST_MAGIC} grid={zoo.grid} seed={zoo.global_seed} C={zoo.n_classes} "
             f"side={zoo.side} domains={','.join(zoo.domains)} classes={classes}",
             ",".join(MANIFEST_COLUMNS)]
    for r in zoo.records:
        lines.append(",".join([r.model_id, r.domain, *r.attrs.tokens(), str(r.seed), repr(float(r.val_acc)),
                               r.split, r.status, r.checkpoint]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> ModelZoo:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(MANIFEST_MAGIC):
        raise ValidationError(f"{path}: missing '{MANIFEST_MAGIC}' header")
    head = dict(tok.split("=", 1) for tok in lines[0][len(MANIFEST_MAGIC):].split())
    if head.get("grid") != grid_hash():
        raise ValidationError(f"{path}: grid hash {head.get('grid')} does not match {grid_hash()}")
    records = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split(",")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise ValidationError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(parts)}")
        attrs = AttributeVector.from_tokens(parts[2:11])
        records.append(ModelRecord(parts[0], parts[1], attrs, int(parts[11]), float(parts[12]),
                                   parts[13], parts[15], parts[14]))
    cls_tok = head.get("classes", "all")
    classes = None if cls_tok == "all" else tuple(int(c) for c in cls_tok.split(","))
    return ModelZoo(records, head["domains"].split(","), int(head["seed"]), int(head["C"]), int(head["side"]),
                    head["grid"], classes)


def zoo_from_config(cfg: Config) -> tuple[ModelZoo, dict[str, DomainData]]:
    specs = default_domain_specs(cfg.data)
    data = gen_synthetic_domains(cfg.seed, specs, cfg.data.train_fraction, cfg.data.val_fraction)
    zoo = plan_zoo([s.domain_id for s in specs], cfg.zoo.models_per_domain, cfg.seed, cfg.data.n_classes,
                   cfg.data.side, cfg.zoo.exclude_collapse)
    return zoo, data


def domain_pixel_stats(datasets: Mapping[str, DomainData]) -> dict[str, tuple[float, float]]:
    return {d: (float(v.images.mean()), float(v.images.var())) for d, v in datasets.items()}


def iter_attr_labels(records: Iterable[ModelRecord]) -> np.ndarray:
    return np.array([r.attrs.indices() for r in records], dtype=np.int64).reshape(-1, len(ATTRIBUTES))
