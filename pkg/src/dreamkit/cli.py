"""Command-line entry point: ``dreamkit <subcommand> [options]``.

Exit codes: 0 success, 2 validation error, 3 incompatibility error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import harness as H
from . import nn
from . import zoo as Z
from .baselines import LinearSVM, train_kennen, train_linear_svm, train_mmd
from .config import Config
from .dream import DreamPipeline, select_lambda, train_dream
from .errors import IncompatibilityError, ValidationError
from .fingerprint import read_fingerprints, restrict_classes, write_fingerprints

log = logging.getLogger("dreamkit")


def _csv_list(text: str, cast=str) -> list:
    return [cast(t) for t in text.split(",") if t.strip()]


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _workspace(args) -> H.Workspace:
    return H.Workspace(_config(args), args.out_dir, args.jobs)


def load_predictor(path: str | Path):
    _, meta = nn.checkpoint.load(path)
    return LinearSVM.load(path) if meta.get("kind") == "svm" else DreamPipeline.load(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_config(args) -> None:
    print(_config(args).dumps())


def cmd_gen_data(args) -> None:
    ws = _workspace(args)
    out = Path(args.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for d, data in ws.datasets.items():
        np.savez(out / f"{d}.npz", images=data.images, labels=data.labels, train_idx=data.train_idx,
                 val_idx=data.val_idx, query_idx=data.query_idx)
    for d, (mean, var) in Z.domain_pixel_stats(ws.datasets).items():
        print(f"{d}: {len(ws.datasets[d].labels)} images, pixel mean {mean:.4f}, var {var:.4f}")


def cmd_train_zoo(args) -> None:
    ws = _workspace(args)
    classes = _csv_list(args.classes, int) if args.classes else None
    domains = _csv_list(args.domains) if args.domains else None
    zoo = ws.zoo(classes, domains)
    done = [r for r in zoo.records if r.status != "planned"]
    acc = np.array([r.val_acc for r in done]) if done else np.array([np.nan])
    print(f"zoo {ws.zoo_dir(zoo.classes)}: {len(done)}/{len(zoo.records)} trained, "
          f"mean val acc {np.nanmean(acc):.4f}, nonfinite {sum(r.status == 'nonfinite' for r in done)}")


def cmd_fingerprint(args) -> None:
    ws = _workspace(args)
    cfg = ws.cfg
    if args.queries is not None:
        cfg.fingerprint.n_queries = args.queries
    seed = cfg.seed if args.trial_seed is None else args.trial_seed
    plan = H.ExperimentPlan(args.target, tuple(d for d in ws.domains if d != args.target), methods=(),
                            seeds=(seed,), mode=args.mode,
                            classes=tuple(_csv_list(args.classes, int)) if args.classes else None)
    data = H.prepare_trial(ws, plan, seed)
    out = Path(args.out_dir) / "fingerprints" / f"{args.target}-s{seed}-N{cfg.fingerprint.n_queries}"
    out.mkdir(parents=True, exist_ok=True)
    for name, fps in (("train", data.train), ("val", data.val), ("test", data.test)):
        write_fingerprints(out / f"{name}.fp", fps)
        print(f"{out / (name + '.fp')}: {len(fps)} rows, C={fps.n_classes} N={fps.n_queries}")


def cmd_train_dream(args) -> None:
    cfg = _config(args)
    train = read_fingerprints(args.train)
    if args.epochs is not None:
        cfg.dream.epochs = args.epochs
    if args.lam is not None:
        cfg.dream.lam = args.lam
        pipe = train_dream(train, cfg.dream, cfg.seed)
        note = f"lambda={args.lam!r}"
    else:
        if not args.val:
            raise ValidationError("lambda selection needs --val (or pass --lambda)")
        lam, pipe, scores = select_lambda(train, read_fingerprints(args.val), cfg.dream, cfg.seed)
        note = f"lambda={lam!r} (val scores {scores})"
    pipe.save(args.output)
    first, tail = H.class_loss_drop(pipe.state.history)
    print(f"saved {args.output}: {note}; classifier loss {first:.4f} -> {tail:.4f}")


def cmd_train_baseline(args) -> None:
    cfg = _config(args)
    train = read_fingerprints(args.train)
    if args.epochs is not None:
        cfg.baselines.epochs = args.epochs
    if args.kind == "svm":
        model = train_linear_svm(train.matrix(), train.labels(), cfg.baselines, cfg.seed)
    elif args.kind == "kennen":
        model = train_kennen(train, cfg.dream, cfg.baselines, cfg.seed)
    else:
        gamma = cfg.baselines.gamma if args.gamma is None else args.gamma
        model = train_mmd(train, cfg.dream, cfg.baselines, cfg.seed, gamma=gamma)
    model.save(args.output)
    print(f"saved {args.output} ({args.kind})")


def cmd_eval(args) -> None:
    model = load_predictor(args.checkpoint)
    test = read_fingerprints(args.test)
    if args.classes:
        test = restrict_classes(test, _csv_list(args.classes, int))
    model.check_compatible(test)
    pred = model.predict(test.matrix())
    accs, _ = H.per_attribute_accuracy(pred, test.labels())
    table = H.ResultTable([H.ResultRow(getattr(model, "kind", "model"), args.target or "test", 0, 0,
                                       tuple(float(a) for a in accs))])
    if args.predictions:
        H._write_predictions(Path(args.predictions), test, pred)
    print(table.to_text(), end="")


def cmd_sweep(args) -> None:
    ws = _workspace(args)
    cast = float if args.axis == "lambda" else int
    values = _csv_list(args.values, cast)
    seeds = H.trial_seeds(ws.cfg, args.trials)
    targets = _csv_list(args.targets) if args.targets else None
    tables, text = H.sweep(ws, args.axis, values, _csv_list(args.methods), seeds, targets)
    out = Path(args.out_dir) / f"sweep-{args.axis}.csv"
    out.write_text(text)
    for t in tables.values():
        print(t.to_text())
    print(f"wrote {out}")


def cmd_export_embeddings(args) -> None:
    pipe = DreamPipeline.load(args.checkpoint)
    fps = read_fingerprints(args.fingerprints)
    H.export_embeddings(pipe, fps, args.output)
    print(f"wrote {len(fps)} embeddings to {args.output}")


def cmd_probe(args) -> None:
    cfg = _config(args)
    fps = read_fingerprints(args.fingerprints)
    raw = H.domain_probe(fps.matrix(), fps.domains(), cfg.seed, cfg.harness.probe_C)
    print(f"probe accuracy on raw fingerprints: {100 * raw:.2f}%")
    if args.checkpoint:
        pipe = DreamPipeline.load(args.checkpoint)
        pipe.check_compatible(fps)
        z = H.domain_probe(pipe.embed(fps.matrix()), fps.domains(), cfg.seed, cfg.harness.probe_C)
        print(f"probe accuracy on embeddings:       {100 * z:.2f}%")


def cmd_report(args) -> None:
    ws = _workspace(args)
    kw = {"seeds": H.trial_seeds(ws.cfg, args.trials)}
    if args.methods:
        kw["methods"] = tuple(_csv_list(args.methods))
    if args.mode != "standard":
        classes = _csv_list(args.classes, int) if args.classes else None
        table = H.run_domain_shift(ws, args.mode, classes, **kw)
    else:
        table = H.run_lodo(ws, H.rotation_plans(ws.cfg, ws.domains, **kw), title="leave-one-domain-out",
                           pred_dir=Path(args.out_dir) / "predictions")
    stem = "report" if args.mode == "standard" else f"report-{args.mode}"
    (Path(args.out_dir) / f"{stem}.csv").write_text(table.to_csv())
    text = table.to_text()
    (Path(args.out_dir) / f"{stem}.txt").write_text(text)
    print(text, end="")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    def globals_(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags; suppressed defaults keep them from
        # overwriting values given before the subcommand name
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--config", default=d(None), help="JSON config file (see `dreamkit config` for every key)")
        g.add_argument("--seed", type=int, default=d(None), help="global seed (overrides the config)")
        g.add_argument("--out-dir", default=d("dreamkit-out"), help="workspace directory")
        g.add_argument("--jobs", type=int, default=d(1), help="parallel worker processes")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = globals_(True)
    p = argparse.ArgumentParser(prog="dreamkit", parents=[globals_(False)],
                                description="Infer model attributes from black-box outputs across domains.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("config", cmd_config, "print the effective configuration")
    add("gen-data", cmd_gen_data, "generate the synthetic domains")
    sp = add("train-zoo", cmd_train_zoo, "train the white-box model zoo")
    sp.add_argument("--classes", help="train on this class subset, e.g. 0,1,2,3")
    sp.add_argument("--domains", help="only train models of these domains")

    sp = add("fingerprint", cmd_fingerprint, "collect train/val/test fingerprints for one target domain")
    sp.add_argument("--target", required=True)
    sp.add_argument("--trial-seed", type=int)
    sp.add_argument("--queries", type=int, help="number of queries N")
    sp.add_argument("--mode", choices=H.MODES, default="standard")
    sp.add_argument("--classes")

    sp = add("train-dream", cmd_train_dream, "train the adversarial reverse model")
    sp.add_argument("--train", required=True)
    sp.add_argument("--val")
    sp.add_argument("--lambda", dest="lam", type=float, help="fixed lambda (skips selection)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--output", required=True)

    sp = add("train-baseline", cmd_train_baseline, "train a comparison method")
    sp.add_argument("--kind", choices=("kennen", "mmd", "svm"), required=True)
    sp.add_argument("--train", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--output", required=True)

    sp = add("eval", cmd_eval, "score a checkpoint on labelled fingerprints")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--target")
    sp.add_argument("--classes", help="restrict test fingerprints to these classes")
    sp.add_argument("--predictions", help="write per-model predictions here")

    sp = add("sweep", cmd_sweep, "evaluate over lambda, query_count or zoo_size values")
    sp.add_argument("--axis", choices=H.SWEEP_AXES, required=True)
    sp.add_argument("--values", required=True)
    sp.add_argument("--methods", default="dream")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--targets")

    sp = add("export-embeddings", cmd_export_embeddings, "write generator embeddings as a text table")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--fingerprints", required=True)
    sp.add_argument("--output", required=True)

    sp = add("probe", cmd_probe, "domain-probe accuracy on raw fingerprints (and embeddings)")
    sp.add_argument("--fingerprints", required=True)
    sp.add_argument("--checkpoint")

    sp = add("report", cmd_report, "full rotation run; writes report.csv and report.txt")
    sp.add_argument("--methods")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--mode", choices=H.MODES, default="standard")
    sp.add_argument("--classes")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except IncompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
