"""``hyperscale`` command line.

Exit codes: 0 success, 2 usage or input error, 3 infeasible selection,
4 numerical failure. ``HYPERSCALE_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from . import experiments, plotting
from .cost import InfeasibleSelection, SelectionConstraint, frontier_report, pareto_mask, select_factor
from .data import directory_is_empty, load_dataset, split, synth_shapes, write_dataset
from .evaluation import SweepCurve, factor_grid, sweep
from .tensor import NumericalError
from .training import PriorSpec, TrainConfig, Trainer, TrainingDiverged
from .unet import RescalePolicy, UNetConfig

log = logging.getLogger("hyperscale")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _prior(text: str) -> PriorSpec:
    try:
        lo, hi = (float(v) for v in text.split(":"))
        return PriorSpec(lo, hi)
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected LO:HI with 0 <= LO <= HI <= 1, got {text!r}") from err


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from err


def _figure_path(csv_path: Path, suffix: str = "") -> Path:
    return csv_path.with_name(csv_path.stem + suffix + ".svg")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if not directory_is_empty(out):
        if not args.force:
            raise UsageError(f"{out} is not empty; pass --force to overwrite")
        for sub in ("images", "masks"):
            shutil.rmtree(out / sub, ignore_errors=True)
        (out / "dataset.json").unlink(missing_ok=True)
    ds = synth_shapes(args.n, args.size, args.classes, seed=args.seed)
    if args.n >= 2 and args.test_frac > 0:
        train, test = split(ds, 1.0 - args.test_frac, seed=args.seed)
        write_dataset(out, {"train": train, "test": test})
    else:
        write_dataset(out, {"train": ds})
    print(f"wrote {args.n} items to {out}")
    return EXIT_OK


def _load_config(path: Optional[str]) -> tuple[dict, dict]:
    if not path:
        return {}, {}
    with open(path) as fh:
        cfg = json.load(fh)
    unknown = set(cfg) - {"net", "train"}
    if unknown:
        raise UsageError(f"{path}: unknown top-level keys {sorted(unknown)} (expected 'net' and/or 'train')")
    return cfg.get("net", {}), cfg.get("train", {})


def cmd_train(args) -> int:
    if args.mode == "fixed" and args.prior is not None:
        raise UsageError("--prior conflicts with --mode fixed; use --phi")
    if args.mode == "hyper" and args.phi is not None:
        raise UsageError("--phi has no meaning for --mode hyper; use --prior")
    net_over, train_over = _load_config(args.config)
    data = load_dataset(args.data, "train")
    net_cfg = UNetConfig.from_dict({"in_channels": data.in_channels, "num_classes": data.num_classes, **net_over})

    fields = dict(train_over)
    fields.update(mode=args.mode, seed=args.seed)
    for flag, key in (
        ("prior", "prior"),
        ("phi", "phi"),
        ("steps", "max_steps"),
        ("batch_size", "batch_size"),
        ("lr", "learning_rate"),
        ("patience", "patience"),
        ("val_every", "val_every"),
        ("num_factors", "num_factors"),
    ):
        value = getattr(args, flag)
        if value is not None:
            fields[key] = value
    cfg = TrainConfig.from_dict(fields)
    train, val = split(data, 0.8, seed=cfg.seed)

    if args.resume:
        trainer = Trainer.resume(ckpt_io.load(args.resume), train, val)
    else:
        trainer = Trainer(net_cfg, cfg, train, val)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")

    def progress(row):
        if row["val_loss"] is not None:
            log.info("step %d  train %.4f  val %.4f", row["step"], row["train_loss"], row["val_loss"])

    try:
        trainer.run(progress)
    except TrainingDiverged as err:
        ckpt_io.save(err.checkpoint, out)
        _write_log(trainer.history, log_path)
        print(f"training diverged: {err}; last good checkpoint (step {err.checkpoint.step}) saved to {out}", file=sys.stderr)
        return EXIT_NUMERICAL
    best = trainer.best_checkpoint()
    ckpt_io.save(best, out)
    if args.state:
        ckpt_io.save(trainer.last_checkpoint(), args.state)
    _write_log(trainer.history, log_path)
    print(f"saved {args.mode} checkpoint from step {best.step} (best val loss {best.meta.get('best_val')}) to {out}")
    return EXIT_OK


def _write_log(history, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "train_loss", "val_loss", "phi"])
        for row in history:
            val = "" if row["val_loss"] is None else repr(row["val_loss"])
            writer.writerow([row["step"], repr(row["train_loss"]), val, row["phi"]])


def cmd_sweep(args) -> int:
    if not args.step > 0:
        raise UsageError("--step must be > 0")
    ck = ckpt_io.load(args.ckpt)
    if ck.mode == "fixed":
        raise UsageError("sweep needs a hypernetwork (or variable-resolution) checkpoint")
    data = load_dataset(args.data, args.split)
    curve = sweep(ck, data, step=args.step)
    out = Path(args.out)
    curve.write_csv(out)
    if not args.no_plot:
        plotting.sweep_figure({ck.mode: curve}, _figure_path(out))
    print(f"wrote {len(curve.records)} rows to {out}")
    return EXIT_OK


def cmd_select(args) -> int:
    curve = SweepCurve.read_csv(args.curve)
    constraint = SelectionConstraint(args.alpha, args.metric)
    try:
        rec = select_factor(curve, constraint)
    except InfeasibleSelection as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    acc = rec.mean_dice if args.metric == "mean_dice" else rec.per_label[int(args.metric.rsplit("_", 1)[1]) - 1]
    print(f"phi*={rec.phi:g}  flops={rec.flops}  ({rec.flops / 1e9:.4f} GFLOPs)  {args.metric}={acc:.4f}")
    out = Path(args.out)
    out.write_text(frontier_report(curve, rec.phi, args.metric))
    if not args.no_plot:
        records = curve.records
        from .cost import _accuracy

        accuracy = [_accuracy(r, args.metric) for r in records]
        costs = [r.flops for r in records]
        plotting.frontier_figure(accuracy, costs, pareto_mask(accuracy, costs), _figure_path(out), records.index(rec))
    return EXIT_OK


def cmd_export(args) -> int:
    if not 0.0 < args.phi <= 1.0:
        raise UsageError("--phi must lie in (0, 1]")
    ck = ckpt_io.load(args.ckpt)
    if ck.mode != "hyper":
        raise UsageError("export needs a hypernetwork checkpoint")
    policy = RescalePolicy.single(args.phi) if ck.num_factors == 1 else RescalePolicy.separate([args.phi] * ck.num_factors)
    theta = ck.weights(policy).numpy()
    fixed = ckpt_io.fixed_checkpoint(theta, ck.net_config, args.phi, {"source": "hypernetwork", "source_seed": ck.seed})
    ckpt_io.save(fixed, args.out)
    print(f"exported {theta.size} weights at phi={args.phi:g} to {args.out}")
    return EXIT_OK


def cmd_study(args) -> int:
    out = Path(args.out)
    kind = args.kind
    if kind == "prior_width":
        if not args.data:
            raise UsageError("prior_width needs --data")
        data = load_dataset(args.data, "train")
        train, val = split(data, 0.8, seed=args.seed)
        net_over, train_over = _load_config(args.config)
        net_cfg = UNetConfig.from_dict({"in_channels": data.in_channels, "num_classes": data.num_classes, **net_over})
        base = TrainConfig.from_dict(train_over)
        if args.steps is not None:
            base = replace(base, max_steps=args.steps)
        test = _maybe_split(args.data, "test")
        seeds = [args.seed + i for i in range(args.num_seeds)]
        report = experiments.prior_width_study(
            net_cfg, base, train, val, args.radii, seeds, test=test, progress=lambda s: log.info("training %s", s)
        )
        report.write_csv(out)
        plotting.prior_width_figure(report, _figure_path(out))
    elif kind == "transfer":
        if not (args.ckpt and args.baseline and args.data):
            raise UsageError("transfer needs --ckpt (hypernetwork), --baseline (fixed) and --data")
        phis = args.phis or factor_grid(args.step or 0.05)
        report = experiments.transfer_study(
            ckpt_io.load(args.ckpt), ckpt_io.load(args.baseline), load_dataset(args.data, args.split), phis
        )
        report.write_csv(out)
        plotting.transfer_figure(report, _figure_path(out))
    elif kind == "separate":
        if not (args.ckpt and args.data):
            raise UsageError("separate needs --ckpt and --data")
        ck = ckpt_io.load(args.ckpt)
        try:
            report = experiments.separate_factor_study(ck, load_dataset(args.data, args.split), args.step or 0.1)
        except ValueError as err:
            raise UsageError(str(err)) from err
        report.write_csv(out)
        mask = [r["on_frontier"] for r in report.rows]
        plotting.frontier_figure(report.column("mean_dice"), report.column("flops"), mask, _figure_path(out))
    else:  # cv
        if not args.ckpt:
            raise UsageError("cv needs --ckpt")
        phis = args.phis or factor_grid(args.step or 0.1, include_zero=True)
        report = experiments.weight_cv_analysis(ckpt_io.load(args.ckpt), phis)
        report.write_csv(out)
        plotting.cv_figure(report, _figure_path(out))
    print(f"wrote {len(report.rows)} rows to {out}")
    return EXIT_OK


def _maybe_split(path, name):
    try:
        return load_dataset(path, name)
    except KeyError:
        return None


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperscale", description="Hypernetwork-amortized feature rescaling for UNets.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=250)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=3, help="foreground classes (1-3)")
    s.add_argument("--test-frac", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a hypernetwork or a baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=("hyper", "fixed", "varres"), default="hyper")
    t.add_argument("--prior", type=_prior, help="LO:HI uniform prior over phi (hyper) or input scale (varres)")
    t.add_argument("--phi", type=float, help="rescaling factor for fixed/varres training")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with optional 'net' and 'train' sections")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--val-every", type=int)
    t.add_argument("--num-factors", type=int, help="1 for a shared factor, K for one per rescaling step")
    t.add_argument("--log", help="training-log CSV (default: OUT with .log.csv)")
    t.add_argument("--state", help="also save the full resumable state here")
    t.add_argument("--resume", help="continue from a state saved with --state")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="evaluate a checkpoint over a grid of factors")
    w.add_argument("--ckpt", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--split", default="test")
    w.add_argument("--step", type=float, default=0.01)
    w.add_argument("--out", required=True)
    w.add_argument("--no-plot", action="store_true")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("select", help="cheapest factor meeting an accuracy floor")
    c.add_argument("--curve", required=True)
    c.add_argument("--alpha", type=float, required=True)
    c.add_argument("--metric", default="mean_dice")
    c.add_argument("--out", required=True)
    c.add_argument("--no-plot", action="store_true")
    c.set_defaults(func=cmd_select)

    e = sub.add_parser("export", help="write the weights predicted at one factor as a standalone network")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--phi", type=float, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    y = sub.add_parser("study", help="run an analysis study")
    y.add_argument("--kind", required=True, choices=("prior_width", "transfer", "separate", "cv"))
    y.add_argument("--out", required=True)
    y.add_argument("--data")
    y.add_argument("--split", default="test")
    y.add_argument("--ckpt")
    y.add_argument("--baseline", help="fixed-factor checkpoint (transfer)")
    y.add_argument("--config", help="training JSON (prior_width)")
    y.add_argument("--radii", type=_floats, default=[0.0, 0.05, 0.1, 0.2])
    y.add_argument("--num-seeds", type=int, default=3)
    y.add_argument("--steps", type=int)
    y.add_argument("--step", type=float, help="grid step")
    y.add_argument("--phis", type=_floats, help="explicit factor grid")
    y.add_argument("--seed", type=int, default=0)
    y.set_defaults(func=cmd_study)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("HYPERSCALE_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        parser.error(f"HYPERSCALE_THREADS must be an integer, got {threads!r}")
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as err:
        parser.error(str(err))
    except InfeasibleSelection as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, FileNotFoundError) as err:
        print(f"hyperscale {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
