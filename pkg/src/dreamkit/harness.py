"""Leave-one-domain-out experiments, metrics, sweeps and reports.

A :class:`Workspace` owns the on-disk cache (synthetic data are regenerated
from the seed; zoo checkpoints and fingerprint files are written once and
re-read). :func:`run_lodo` trains the requested methods on source-domain
fingerprints and scores them on the target domain's test-split models.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import zoo as Z
from .baselines import train_kennen, train_linear_svm, train_mmd
from .config import Config
from .dream import DreamPipeline, select_lambda, train_dream
from .errors import ValidationError
from .fingerprint import (FingerprintSet, QuerySet, build_query_set, collect_fingerprint, read_fingerprints,
                          restrict_classes, write_fingerprints)
from .zoo import ATTRIBUTE_NAMES, ATTRIBUTES, REPORT_LABELS, REPORT_ORDER

log = logging.getLogger(__name__)

METHODS = ("random", "oracle", "svm", "kennen", "mmd", "dream")
MODES = ("standard", "class_subset", "disjoint")
SWEEP_AXES = ("lambda", "query_count", "zoo_size")
MODE_TAGS = {"standard": "", "class_subset": "*", "disjoint": "**"}


# ---------------------------------------------------------------------------
# metrics


def random_accuracy(attribute: str) -> float:
    """Expected accuracy (%) of uniform guessing: ``100 / |values|``."""
    values = dict(ATTRIBUTES)[attribute]
    return 100.0 / len(values)


def random_row() -> np.ndarray:
    return np.array([random_accuracy(a) for a in ATTRIBUTE_NAMES])


def per_attribute_accuracy(predictions: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Percent exact matches per attribute head (attribute-table order) and their mean."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValidationError(f"predictions {pred.shape} and labels {lab.shape} are not aligned")
    if pred.ndim != 2 or pred.shape[1] != len(ATTRIBUTE_NAMES):
        raise ValidationError(f"expected (n, {len(ATTRIBUTE_NAMES)}) arrays, got {pred.shape}")
    if len(pred) == 0:
        raise ValidationError("no predictions to score")
    accs = 100.0 * np.mean(pred == lab, axis=0)
    return accs, float(np.mean(accs))


def normalized_accuracy(raw: float, attribute: str) -> float:
    """Rescale so random guessing maps to 0 and perfect prediction to 1."""
    r = random_accuracy(attribute)
    return (raw - r) / (100.0 - r)


# ---------------------------------------------------------------------------
# result tables


@dataclass(frozen=True)
class ResultRow:
    method: str
    target: str
    trial: int
    seed: int
    accs: tuple[float, ...]  # attribute-table order
    note: str = ""

    def __post_init__(self) -> None:
        if len(self.accs) != len(ATTRIBUTE_NAMES):
            raise ValidationError(f"row needs {len(ATTRIBUTE_NAMES)} accuracies, got {len(self.accs)}")
        if any(not 0.0 <= a <= 100.0 for a in self.accs):
            raise ValidationError(f"accuracies out of [0, 100]: {self.accs}")

    @property
    def average(self) -> float:
        return float(np.mean(self.accs))

    def report_values(self) -> list[float]:
        return [self.accs[ATTRIBUTE_NAMES.index(a)] for a in REPORT_ORDER]


CSV_COLUMNS = ("method", "target", "trial", "seed", *REPORT_LABELS, "Avg", "note")


@dataclass
class ResultTable:
    """Method x trial rows of per-attribute accuracies, emitted as CSV or an aligned text table."""

    rows: list[ResultRow] = field(default_factory=list)
    title: str = ""

    def add(self, row: ResultRow) -> None:
        self.rows.append(row)

    def extend(self, rows: Iterable[ResultRow]) -> None:
        self.rows.extend(rows)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def targets(self) -> list[str]:
        return list(dict.fromkeys(r.target for r in self.rows))

    def select(self, method: str | None = None, target: str | None = None) -> list[ResultRow]:
        return [r for r in self.rows if (method is None or r.method == method)
                and (target is None or r.target == target)]

    def aggregate(self, method: str, target: str | None = None) -> tuple[np.ndarray, np.ndarray, float, float]:
        """Mean and std over trials of the per-attribute columns and of the average."""
        rows = self.select(method, target)
        if not rows:
            raise ValidationError(f"no rows for method={method!r} target={target!r}")
        accs = np.array([r.accs for r in rows])
        avgs = np.array([r.average for r in rows])
        return accs.mean(0), accs.std(0), float(avgs.mean()), float(avgs.std())

    def check_consistency(self) -> None:
        for r in self.rows:
            recount = sum(r.accs) / len(r.accs)
            if abs(recount - r.average) > 1e-9:
                raise ValidationError(f"row {r.method}/{r.target}/{r.trial}: average {r.average} != {recount}")

    def to_csv(self) -> str:
        self.check_consistency()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.method, r.target, r.trial, r.seed, *(f"{v:.6f}" for v in r.report_values()),
                        f"{r.average:.6f}", r.note])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, title: str = "") -> "ResultTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValidationError(f"unexpected result header {header}")
        rows = []
        for rec in reader:
            vals = [float(v) for v in rec[4:4 + len(REPORT_LABELS)]]
            accs = [0.0] * len(ATTRIBUTE_NAMES)
            for a, v in zip(REPORT_ORDER, vals):
                accs[ATTRIBUTE_NAMES.index(a)] = v
            row = ResultRow(rec[0], rec[1], int(rec[2]), int(rec[3]), tuple(accs), rec[-1])
            if abs(row.average - float(rec[-2])) > 1e-5:
                raise ValidationError(f"row {rec[:3]}: stored average {rec[-2]} != column mean {row.average}")
            rows.append(row)
        return cls(rows, title)

    def to_text(self) -> str:
        """Aligned table of trial means, one line per (method, target), plus an all-targets line."""
        self.check_consistency()
        header = ["method", "target", *REPORT_LABELS, "Avg", "std"]
        lines = []
        for method in self.methods():
            targets = self.targets()
            groups = [(t, t) for t in targets if self.select(method, t)]
            if len(groups) > 1:
                groups.append(("all", None))
            for label, t in groups:
                mean, _, avg, avg_std = self.aggregate(method, t)
                by_name = dict(zip(ATTRIBUTE_NAMES, mean))
                lines.append([method, label, *(f"{by_name[a]:.2f}" for a in REPORT_ORDER),
                              f"{avg:.2f}", f"{avg_std:.2f}"])
        widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
        fmt = lambda row: "  ".join(str(x).rjust(w) if i > 1 else str(x).ljust(w)  # noqa: E731
                                    for i, (x, w) in enumerate(zip(row, widths)))
        out = [self.title] if self.title else []
        out += [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines]
        return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# plans and workspace


@dataclass(frozen=True)
class ExperimentPlan:
    target: str
    sources: tuple[str, ...]
    methods: tuple[str, ...] = ("random", "svm", "kennen", "mmd", "dream")
    mode: str = "standard"
    seeds: tuple[int, ...] = (0,)
    classes: tuple[int, ...] | None = None  # class-subset mode: classes seen by source models
    train_size: int | None = None           # per-domain cap on training models
    tune_lambda: bool = True
    tune_gamma: bool = True

    def __post_init__(self) -> None:
        if self.target in self.sources:
            raise ValidationError(f"target {self.target!r} is also a source domain")
        if not self.sources:
            raise ValidationError("plan needs at least one source domain")
        if not self.seeds:
            raise ValidationError("trial count must be at least 1")
        if self.mode not in MODES:
            raise ValidationError(f"unknown split mode {self.mode!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValidationError(f"unknown methods {bad}")
        if self.mode == "class_subset" and self.classes is None:
            raise ValidationError("class-subset mode needs a class list")
        if self.classes is not None and not self.classes:
            raise ValidationError("shared class set is empty")
        if self.train_size is not None and self.train_size < 1:
            raise ValidationError("train_size must be positive")

    @property
    def trials(self) -> int:
        return len(self.seeds)


def trial_seeds(cfg: Config, trials: int | None = None) -> tuple[int, ...]:
    n = cfg.harness.trials if trials is None else trials
    if n < 1:
        raise ValidationError("trial count must be at least 1")
    return tuple(cfg.seed + t for t in range(n))


def rotation_plans(cfg: Config, domains: Sequence[str], **kw) -> list[ExperimentPlan]:
    """One plan per target domain, the others acting as sources."""
    kw.setdefault("seeds", trial_seeds(cfg))
    kw.setdefault("methods", tuple(cfg.harness.methods))
    kw.setdefault("tune_lambda", cfg.harness.tune_lambda)
    kw.setdefault("tune_gamma", cfg.harness.tune_gamma)
    return [ExperimentPlan(t, tuple(d for d in domains if d != t), **kw) for t in domains]


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


class Workspace:
    """Cached artifacts under ``root``: zoos (manifest + checkpoints) and fingerprint files."""

    def __init__(self, cfg: Config, root: str | Path, jobs: int = 1) -> None:
        self.cfg = cfg
        self.root = Path(root)
        self.jobs = jobs
        self._datasets: dict[str, Z.DomainData] | None = None
        self._zoos: dict[str, Z.ModelZoo] = {}

    @property
    def datasets(self) -> dict[str, Z.DomainData]:
        if self._datasets is None:
            specs = Z.default_domain_specs(self.cfg.data)
            self._datasets = Z.gen_synthetic_domains(self.cfg.seed, specs, self.cfg.data.train_fraction,
                                                     self.cfg.data.val_fraction)
        return self._datasets

    @property
    def domains(self) -> list[str]:
        return [s.domain_id for s in Z.default_domain_specs(self.cfg.data)]

    def zoo_seconds(self, classes: Sequence[int] | None = None) -> float | None:
        """Total recorded training time of the zoo, or None if it was built without timing."""
        path = self.zoo_dir(classes) / "timing.txt"
        if not path.exists():
            return None
        return sum(float(line.split()[2]) for line in path.read_text().splitlines() if line.strip())

    def zoo_dir(self, classes: Sequence[int] | None = None) -> Path:
        cls = None if classes is None else list(classes)
        return self.root / f"zoo-{_key(self.cfg.seed, self.cfg.digest('data', 'zoo'), cls)}"

    def planned_zoo(self, classes: Sequence[int] | None = None) -> Z.ModelZoo:
        cfg = self.cfg
        zoo = Z.plan_zoo(self.domains, cfg.zoo.models_per_domain, cfg.seed, cfg.data.n_classes, cfg.data.side,
                         cfg.zoo.exclude_collapse)
        zoo = Z.split_zoo(zoo, cfg.zoo.split_ratios, seed=cfg.seed)
        return replace(zoo, classes=None if classes is None else tuple(classes))

    def zoo(self, classes: Sequence[int] | None = None, domains: Sequence[str] | None = None) -> Z.ModelZoo:
        """The trained zoo, training whatever models of ``domains`` are still missing."""
        if classes is not None and tuple(classes) == tuple(range(self.cfg.data.n_classes)):
            classes = None
        out = self.zoo_dir(classes)
        manifest = out / "manifest.txt"
        key = str(out)
        zoo = self._zoos.get(key)
        if zoo is None:
            zoo = Z.read_manifest(manifest) if manifest.exists() else self.planned_zoo(classes)
        want = set(self.domains if domains is None else domains)
        todo = [i for i, r in enumerate(zoo.records) if r.status == "planned" and r.domain in want]
        if todo:
            log.info("training %d white-box models into %s", len(todo), out)
            t0 = time.perf_counter()
            zoo = Z.train_zoo(zoo, self.datasets, self.cfg.zoo, out, jobs=self.jobs, order=todo)
            out.mkdir(parents=True, exist_ok=True)
            Z.write_manifest(manifest, zoo)
            with open(out / "timing.txt", "a") as fh:
                fh.write(f"{len(todo)} models {time.perf_counter() - t0:.1f} s jobs={self.jobs}\n")
        self._zoos[key] = zoo
        return zoo

    def fingerprints(self, zoo: Z.ModelZoo, queries: QuerySet, domains: Sequence[str]) -> FingerprintSet:
        """Fingerprints of every usable model of ``domains``, cached as a text file and re-read."""
        n_out = zoo.n_outputs
        root = self.zoo_dir(zoo.classes)
        path = root / "fingerprints" / (f"{_key(queries.seed, queries.n, queries.source_domains, list(domains))}"
                                        f"-N{queries.n}.fp")
        if not path.exists():
            rows = []
            for r in zoo.records:
                if r.domain not in domains or r.status != "ok":
                    continue
                net = Z.load_network(r, zoo, self.cfg.zoo, root)
                rows.append(collect_fingerprint(net, queries, n_out, r.model_id, r.domain, r.attrs))
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            write_fingerprints(tmp, FingerprintSet(rows, zoo.m, n_out, queries.n))
            tmp.replace(path)
        return read_fingerprints(path)


def split_rows(fps: FingerprintSet, zoo: Z.ModelZoo, domains: Sequence[str], split: str,
               cap: int | None = None) -> FingerprintSet:
    """Rows of ``domains`` whose model carries ``split``; ``cap`` keeps the first rows per domain."""
    tags = {r.model_id: r.split for r in zoo.records}
    keep, seen = [], {d: 0 for d in domains}
    for i, fp in enumerate(fps.rows):
        if fp.domain in seen and tags.get(fp.model_id) == split:
            if cap is None or seen[fp.domain] < cap:
                keep.append(i)
                seen[fp.domain] += 1
    if not keep:
        raise ValidationError(f"no {split!r} fingerprints for domains {list(domains)}")
    return fps.subset(keep, split=split)


def audit_sources(fps: FingerprintSet, target: str, what: str) -> None:
    """Refuse any row tagged with the target domain in a training or tuning set."""
    leaked = [fp.model_id for fp in fps.rows if fp.domain == target]
    if leaked:
        raise ValidationError(f"{what} set contains {len(leaked)} target-domain rows (e.g. {leaked[0]})")


# ---------------------------------------------------------------------------
# running methods


@dataclass
class Fit:
    """What a method produced for one (target, trial): predictions on the target test rows."""

    method: str
    predictions: np.ndarray
    model: object = None
    note: str = ""


def fit_method(method: str, train: FingerprintSet, val: FingerprintSet, test: FingerprintSet,
               cfg: Config, seed: int, plan: ExperimentPlan) -> Fit:
    x_test = test.matrix()
    if method == "random":
        return Fit(method, np.zeros((len(test), len(ATTRIBUTE_NAMES)), dtype=np.int64), note="analytic")
    if method == "oracle":
        return Fit(method, test.labels())
    if method == "svm":
        svm = train_linear_svm(train.matrix(), train.labels(), cfg.baselines, seed)
        return Fit(method, svm.predict(x_test), svm)
    if method == "kennen":
        pipe = train_kennen(train, cfg.dream, cfg.baselines, seed)
        return Fit(method, pipe.predict(x_test), pipe)
    if method == "mmd":
        if plan.tune_gamma and len(cfg.baselines.gamma_grid) > 1:
            best, best_score, best_pipe = None, -1.0, None
            for g in sorted(set(cfg.baselines.gamma_grid)):
                pipe = train_mmd(train, cfg.dream, cfg.baselines, seed, gamma=g)
                score = float(np.mean(pipe.predict(val.matrix()) == val.labels()))
                if score > best_score:
                    best, best_score, best_pipe = g, score, pipe
            return Fit(method, best_pipe.predict(x_test), best_pipe, f"gamma={best!r}")
        g = cfg.baselines.gamma if not plan.tune_gamma else cfg.baselines.gamma_grid[0]
        pipe = train_mmd(train, cfg.dream, cfg.baselines, seed, gamma=g)
        return Fit(method, pipe.predict(x_test), pipe, f"gamma={g!r}")
    if method == "dream":
        if plan.tune_lambda:
            lam, pipe, _ = select_lambda(train, val, cfg.dream, seed)
        else:
            lam, pipe = cfg.dream.lam, train_dream(train, cfg.dream, seed)
        return Fit(method, pipe.predict(x_test), pipe, f"lambda={lam!r}")
    raise ValidationError(f"unknown method {method!r}")


@dataclass
class TrialData:
    train: FingerprintSet
    val: FingerprintSet
    test: FingerprintSet
    queries: QuerySet
    zoo: Z.ModelZoo


def prepare_trial(ws: Workspace, plan: ExperimentPlan, seed: int) -> TrialData:
    """Queries from source domains, fingerprints, and the train/val (source) and test (target) sets."""
    cfg = ws.cfg
    all_classes = tuple(range(cfg.data.n_classes))
    classes = plan.classes if plan.mode == "class_subset" else None
    subset = classes is not None and tuple(classes) != all_classes
    queries = build_query_set(ws.datasets, cfg.fingerprint.n_queries, seed, plan.sources,
                              classes if subset else None)
    target_zoo = ws.zoo(domains=[plan.target])
    source_zoo = ws.zoo(classes, domains=plan.sources) if subset else ws.zoo(domains=plan.sources)
    if plan.mode == "disjoint":
        sizes = cfg.zoo.disjoint_sizes
        target_zoo = source_zoo = Z.disjoint_attribute_split(source_zoo, sizes, seed=cfg.seed)
    src = ws.fingerprints(source_zoo, queries, plan.sources)
    tgt = ws.fingerprints(target_zoo, queries, [plan.target])
    train = split_rows(src, source_zoo, plan.sources, "train", plan.train_size)
    val = split_rows(src, source_zoo, plan.sources, "val")
    test = split_rows(tgt, target_zoo, [plan.target], "test")
    if subset:
        test = restrict_classes(test, classes)
    audit_sources(train, plan.target, "training")
    audit_sources(val, plan.target, "tuning")
    if plan.mode == "disjoint":
        assert_disjoint_combinations(train, test)
    if (train.n_classes, train.n_queries) != (test.n_classes, test.n_queries):
        raise ValidationError("train and test fingerprints have different (C, N)")
    return TrialData(train, val, test, queries, source_zoo)


def assert_disjoint_combinations(train: FingerprintSet, test: FingerprintSet) -> None:
    shared = {fp.attrs for fp in train.rows} & {fp.attrs for fp in test.rows}
    if shared:
        raise ValidationError(f"{len(shared)} attribute combinations appear in both train and test")


def _write_predictions(path: Path, test: FingerprintSet, pred: np.ndarray) -> None:
    labels = test.labels()
    lines = ["model_id," + ",".join(f"true_{a}" for a in ATTRIBUTE_NAMES) + ","
             + ",".join(f"pred_{a}" for a in ATTRIBUTE_NAMES)]
    for fp, y, p in zip(test.rows, labels, pred):
        lines.append(",".join([fp.model_id, *map(str, y), *map(str, p)]))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def run_trial(ws: Workspace, plan: ExperimentPlan, trial: int,
              on_fit: Callable[[ExperimentPlan, int, Fit, TrialData], None] | None = None,
              pred_dir: str | Path | None = None) -> list[ResultRow]:
    seed = plan.seeds[trial]
    data = prepare_trial(ws, plan, seed)
    rows = []
    tag = MODE_TAGS[plan.mode]
    for method in plan.methods:
        fit = fit_method(method, data.train, data.val, data.test, ws.cfg, seed, plan)
        if method == "random":
            accs = random_row()
        else:
            accs, _ = per_attribute_accuracy(fit.predictions, data.test.labels())
            if pred_dir is not None:
                _write_predictions(Path(pred_dir) / f"{method}{tag and '-' + plan.mode}-{plan.target}-t{trial}.csv",
                                   data.test, fit.predictions)
        rows.append(ResultRow(method + tag, plan.target, trial, seed, tuple(float(a) for a in accs), fit.note))
        if on_fit is not None:
            on_fit(plan, trial, fit, data)
    return rows


def _trial_job(args) -> list[ResultRow]:
    cfg, root, plan, trial, pred_dir = args
    return run_trial(Workspace(cfg, root), plan, trial, pred_dir=pred_dir)


def run_lodo(ws: Workspace, plans: ExperimentPlan | Sequence[ExperimentPlan],
             on_fit: Callable | None = None, pred_dir: str | Path | None = None,
             title: str = "") -> ResultTable:
    """Run every (plan, trial); rows are ordered by plan, then trial, then method."""
    plans = [plans] if isinstance(plans, ExperimentPlan) else list(plans)
    jobs = [(p, t) for p in plans for t in range(p.trials)]
    table = ResultTable(title=title)
    if ws.jobs > 1 and on_fit is None and len(jobs) > 1:
        for p in plans:  # build shared artifacts once before fanning out
            ws.zoo(domains=[p.target, *p.sources])
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(ws.jobs) as pool:
            results = pool.map(_trial_job, [(ws.cfg, ws.root, p, t, pred_dir) for p, t in jobs])
        for rows in results:
            table.extend(rows)
    else:
        for p, t in jobs:
            table.extend(run_trial(ws, p, t, on_fit, pred_dir))
    table.check_consistency()
    return table


def run_domain_shift(ws: Workspace, mode: str, classes: Sequence[int] | None = None,
                     methods: Sequence[str] | None = None, seeds: Sequence[int] | None = None,
                     **kw) -> ResultTable:
    """Rotation run in ``class_subset`` or ``disjoint`` mode; rows are tagged ``*`` / ``**``."""
    if mode not in ("class_subset", "disjoint"):
        raise ValidationError(f"domain-shift mode must be class_subset or disjoint, not {mode!r}")
    extra = {"mode": mode}
    if mode == "class_subset":
        if classes is None or not list(classes):
            raise ValidationError("shared class set is empty")
        extra["classes"] = tuple(int(c) for c in classes)
    if methods is not None:
        extra["methods"] = tuple(methods)
    if seeds is not None:
        extra["seeds"] = tuple(seeds)
    plans = rotation_plans(ws.cfg, ws.domains, **extra, **kw)
    return run_lodo(ws, plans, title=f"domain shift ({mode})")


# ---------------------------------------------------------------------------
# sweeps


def sweep(ws: Workspace, axis: str, values: Sequence, methods: Sequence[str] = ("dream",),
          seeds: Sequence[int] | None = None, targets: Sequence[str] | None = None) -> tuple[dict, str]:
    """One rotation evaluation per axis value with shared seeds; returns tables and a plotting CSV."""
    if axis not in SWEEP_AXES:
        raise ValidationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ValidationError("sweep needs at least one value")
    tables = {}
    for v in values:
        cfg = copy.deepcopy(ws.cfg)
        kw: dict = {"methods": tuple(methods)}
        if seeds is not None:
            kw["seeds"] = tuple(seeds)
        if axis == "lambda":
            v = float(v)
            if v < 0:
                raise ValidationError(f"lambda must be non-negative, got {v}")
            cfg.dream.lam = v
            kw["tune_lambda"] = False
        elif axis == "query_count":
            v = int(v)
            n_src = len(ws.domains) - 1
            if v <= 0 or v % n_src:
                raise ValidationError(f"query count {v} must be a positive multiple of {n_src}")
            cfg.fingerprint.n_queries = v
        else:
            v = int(v)
            if v < 1:
                raise ValidationError(f"zoo size {v} must be positive")
            kw["train_size"] = v
        sub = Workspace(cfg, ws.root, ws.jobs)
        sub._datasets = ws._datasets
        plans = rotation_plans(cfg, ws.domains, **kw)
        if targets is not None:
            plans = [p for p in plans if p.target in targets]
        tables[v] = run_lodo(sub, plans, title=f"{axis}={v}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("axis", "value") + CSV_COLUMNS)
    for v, t in tables.items():
        for r in t.rows:
            w.writerow([axis, v, r.method, r.target, r.trial, r.seed,
                        *(f"{x:.6f}" for x in r.report_values()), f"{r.average:.6f}", r.note])
    return tables, buf.getvalue()


# ---------------------------------------------------------------------------
# embeddings and probes


def export_embeddings(pipe: DreamPipeline, fps: FingerprintSet, path: str | Path | None = None) -> str:
    """Plain-text table ``model_id,domain,z0..z{d-1}`` with round-trip float formatting."""
    pipe.check_compatible(fps)
    z = pipe.embed(fps.matrix())
    lines = ["model_id,domain," + ",".join(f"z{j}" for j in range(z.shape[1]))]
    for fp, row in zip(fps.rows, z):
        lines.append(",".join([fp.model_id, fp.domain, *map(repr, row.tolist())]))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_embeddings(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    ids, doms, vals = [], [], []
    for line in lines[1:]:
        parts = line.split(",")
        ids.append(parts[0])
        doms.append(parts[1])
        vals.append([float(v) for v in parts[2:]])
    return ids, doms, np.array(vals)


def domain_probe(features: np.ndarray, domains: Sequence[str], seed: int = 0, C: float = 1.0,
                 test_fraction: float = 0.5) -> float:
    """Held-out accuracy of a seeded logistic-regression classifier predicting domain from features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(domains)
    if len(set(y.tolist())) < 2:
        raise ValidationError("domain probe needs at least two domains")
    if len(x) != len(y):
        raise ValidationError("features and domain tags are not aligned")
    xtr, xte, ytr, yte = train_test_split(x, y, test_size=test_fraction, random_state=seed, stratify=y)
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=5000, random_state=seed))
    clf.fit(xtr, ytr)
    return float(clf.score(xte, yte))


def held_out_sources(ws: Workspace, data: TrialData, sources: Sequence[str]) -> FingerprintSet:
    """Source-domain rows of models outside the train split (val and test), for probing."""
    src = ws.fingerprints(data.zoo, data.queries, sources)
    test = split_rows(src, data.zoo, sources, "test")
    return FingerprintSet(data.val.rows + test.rows, len(sources), test.n_classes, test.n_queries)


def invariance_probe(pipe: DreamPipeline, fps: FingerprintSet, seed: int = 0, C: float = 1.0) -> tuple[float, float]:
    """Probe accuracy on raw fingerprints and on their embeddings, same rows and split."""
    x = fps.matrix()
    doms = fps.domains()
    return domain_probe(x, doms, seed, C), domain_probe(pipe.embed(x), doms, seed, C)


def class_loss_drop(history: Sequence, tail: float = 0.1) -> tuple[float, float]:
    """(first-epoch classifier loss, moving average over the final ``tail`` fraction)."""
    losses = np.array([h.cls_loss for h in history])
    if len(losses) == 0:
        raise ValidationError("no training history")
    k = max(1, int(round(tail * len(losses))))
    return float(losses[0]), float(losses[-k:].mean())


def summary(table: ResultTable) -> Mapping[str, float]:
    """Mean average accuracy per method over all rows."""
    return {m: table.aggregate(m)[2] for m in table.methods()}
