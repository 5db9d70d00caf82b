"""Query sets, fingerprint collection, and the text fingerprint file format.

File format::

    DREAMFP 1 m=<m> C=<C> N=<N>
    model_id,domain,<9 attribute tokens or ?>,<C*N floats>

Floats are written with ``repr`` (shortest round-trip form), so reading a
file back reproduces every value bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .errors import NonFiniteError, ValidationError
from .zoo import ATTRIBUTE_NAMES, AttributeVector, DomainData

SIMPLEX_TOL = 1e-6
UNKNOWN_DOMAIN = "unknown"
HEADER_MAGIC = "DREAMFP 1"


@dataclass(frozen=True)
class QuerySet:
    images: np.ndarray
    source_domains: tuple[str, ...]
    domain_tags: tuple[str, ...]
    seed: int

    @property
    def n(self) -> int:
        return len(self.images)


def build_query_set(datasets: Mapping[str, DomainData], n_queries: int, seed: int,
                    sources: Sequence[str] | None = None, classes: Sequence[int] | None = None) -> QuerySet:
    """Sample ``n_queries / len(sources)`` query-pool images from each source domain.

    ``classes`` limits the pools to images of those labels.
    """
    sources = tuple(sources if sources is not None else sorted(datasets))
    if n_queries <= 0:
        raise ValidationError("number of queries must be positive")
    if not sources:
        raise ValidationError("at least one source domain is required")
    if n_queries % len(sources):
        raise ValidationError(f"N={n_queries} is not divisible by {len(sources)} source domains")
    per = n_queries // len(sources)
    rng = np.random.default_rng([seed, 3])
    images, tags = [], []
    for d in sources:
        pool = datasets[d].query_idx
        if classes is not None:
            pool = pool[np.isin(datasets[d].labels[pool], classes)]
        if len(pool) == 0:
            raise ValidationError(f"domain {d} has an empty query pool")
        if per > len(pool):
            raise ValidationError(f"domain {d}: {per} queries requested, pool has {len(pool)}")
        pick = rng.choice(pool, size=per, replace=False)
        images.append(datasets[d].images[pick])
        tags.extend([d] * per)
    imgs = np.concatenate(images)
    imgs.setflags(write=False)
    return QuerySet(imgs, sources, tuple(tags), seed)


@dataclass
class Fingerprint:
    model_id: str
    domain: str
    vector: np.ndarray
    n_classes: int
    n_queries: int
    attrs: AttributeVector | None = None

    def __post_init__(self) -> None:
        check_fingerprint(self.vector, self.n_classes, self.n_queries, self.model_id)


def check_fingerprint(vector: np.ndarray, n_classes: int, n_queries: int, row: str = "?") -> None:
    if vector.shape != (n_classes * n_queries,):
        raise ValidationError(f"row {row}: length {vector.size} != C*N = {n_classes * n_queries}")
    if not np.all(np.isfinite(vector)):
        raise ValidationError(f"row {row}: non-finite entries")
    blocks = vector.reshape(n_queries, n_classes)
    if np.any(blocks < -SIMPLEX_TOL) or np.any(blocks > 1 + SIMPLEX_TOL):
        j = int(np.flatnonzero(np.any((blocks < -SIMPLEX_TOL) | (blocks > 1 + SIMPLEX_TOL), axis=1))[0])
        raise ValidationError(f"row {row}, block {j}: entries outside [0, 1]")
    sums = blocks.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > SIMPLEX_TOL)
    if bad.size:
        j = int(bad[0])
        raise ValidationError(f"row {row}, block {j}: probabilities sum to {float(sums[j])!r}, not 1")


@dataclass
class FingerprintSet:
    rows: list[Fingerprint]
    m: int
    n_classes: int
    n_queries: int
    split: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for fp in self.rows:
            if fp.n_classes != self.n_classes or fp.n_queries != self.n_queries:
                raise ValidationError(f"row {fp.model_id}: (C, N) differs from the set's")

    def __len__(self) -> int:
        return len(self.rows)

    def matrix(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, self.n_classes * self.n_queries))
        return np.stack([fp.vector for fp in self.rows])

    def labels(self) -> np.ndarray:
        if any(fp.attrs is None for fp in self.rows):
            raise ValidationError("fingerprint set has unlabeled rows")
        return np.array([fp.attrs.indices() for fp in self.rows], dtype=np.int64).reshape(-1, len(ATTRIBUTE_NAMES))

    def domains(self) -> list[str]:
        return [fp.domain for fp in self.rows]

    def subset(self, keep: Sequence[bool] | Sequence[int], split: str | None = None) -> "FingerprintSet":
        keep = list(keep)
        if keep and isinstance(keep[0], (bool, np.bool_)):
            rows = [r for r, k in zip(self.rows, keep) if k]
        else:
            rows = [self.rows[i] for i in keep]
        return FingerprintSet(rows, self.m, self.n_classes, self.n_queries,
                              self.split if split is None else split, dict(self.meta))


def collect_fingerprint(net: nn.Sequential, queries: QuerySet, n_classes: int, model_id: str = "",
                        domain: str = UNKNOWN_DOMAIN, attrs: AttributeVector | None = None) -> Fingerprint:
    """Eval-mode softmax outputs on every query, concatenated in query order."""
    logits = net.forward(np.asarray(queries.images), train=False)
    if logits.shape != (queries.n, n_classes):
        raise ValidationError(f"model {model_id}: output shape {logits.shape}, expected ({queries.n}, {n_classes})")
    probs = nn.softmax(logits, axis=1)
    if not np.all(np.isfinite(probs)):
        raise NonFiniteError(f"model {model_id}: non-finite outputs")
    return Fingerprint(model_id, domain, probs.reshape(-1), n_classes, queries.n, attrs)


def restrict_classes(fps: FingerprintSet, keep: Sequence[int]) -> FingerprintSet:
    """Keep only the listed classes of every C-block and renormalise each block."""
    keep = list(keep)
    if not keep:
        raise ValidationError("shared class set is empty")
    rows = []
    for fp in fps.rows:
        blocks = fp.vector.reshape(fp.n_queries, fp.n_classes)[:, keep]
        blocks = blocks / blocks.sum(axis=1, keepdims=True)
        rows.append(Fingerprint(fp.model_id, fp.domain, blocks.reshape(-1), len(keep), fp.n_queries, fp.attrs))
    return FingerprintSet(rows, fps.m, len(keep), fps.n_queries, fps.split, dict(fps.meta))


def write_fingerprints(path: str | Path, fps: FingerprintSet) -> None:
    lines = [f"{HEADER_MAGIC} m={fps.m} C={fps.n_classes} N={fps.n_queries}"]
    for fp in fps.rows:
        toks = fp.attrs.tokens() if fp.attrs is not None else ["?"] * len(ATTRIBUTE_NAMES)
        if "," in fp.model_id or "," in fp.domain:
            raise ValidationError(f"row {fp.model_id}: ids may not contain commas")
        lines.append(",".join([fp.model_id, fp.domain, *toks, *map(repr, fp.vector.tolist())]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_fingerprints(path: str | Path, split: str = "") -> FingerprintSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty file")
    head = lines[0].split()
    try:
        if " ".join(head[:2]) != HEADER_MAGIC or len(head) != 5:
            raise ValueError
        kv = dict(tok.split("=", 1) for tok in head[2:])
        m, c, n = int(kv["m"]), int(kv["C"]), int(kv["N"])
    except (ValueError, KeyError):
        raise ValidationError(f"{path}: malformed header {lines[0]!r}") from None
    n_attr = len(ATTRIBUTE_NAMES)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2 + n_attr + c * n:
            raise ValidationError(f"{path}: row {lineno - 1} (line {lineno}) has {len(parts) - 2 - n_attr} "
                                  f"values, expected C*N = {c * n}")
        toks = parts[2:2 + n_attr]
        attrs = None if all(t == "?" for t in toks) else AttributeVector.from_tokens(toks)
        try:
            vec = np.array([float(v) for v in parts[2 + n_attr:]])
        except ValueError as exc:
            raise ValidationError(f"{path}: row {lineno - 1} (line {lineno}): {exc}") from None
        try:
            check_fingerprint(vec, c, n, f"{lineno - 1} ({parts[0]})")
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None
        rows.append(Fingerprint(parts[0], parts[1], vec, c, n, attrs))
    return FingerprintSet(rows, m, c, n, split)
