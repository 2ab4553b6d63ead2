"""Command line entry point: ``irdseg {gen,fill,train,eval,gradcheck}``.

Exit codes: 0 success, 2 config or usage error, 3 I/O or format error,
4 numerical failure (solver non-convergence, non-finite loss, failed
gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from irdseg import config as runconfig
from irdseg import network as net
from irdseg.depth_fill import ConvergenceError, UnsolvableRegionError, fill_depth
from irdseg.gradcheck import OPS, run_gradcheck
from irdseg.metrics import compute_all, format_record, format_report
from irdseg.pnm import ImageFormatError, write_pfm
from irdseg.preprocess import normalize_ir
from irdseg.synth import parallel_map, read_dataset, read_sample, write_dataset
from irdseg.tensor import TensorFormatError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

CHECKPOINT = "model.ckpt"
HISTORY = "history.jsonl"
COMPARISON = "comparison.jsonl"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(path) -> runconfig.RunConfig:
    if path is None:
        return runconfig.RunConfig()
    try:
        return runconfig.load(path)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_IO) from None


def _samples(directory, what="dataset"):
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"{what} directory {d} does not exist", EXIT_IO)
    samples = read_dataset(d)
    if not samples:
        raise CliError(f"{what} directory {d} holds no samples", EXIT_IO)
    return samples


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    if args.count < 0 or args.start < 0:
        raise CliError("--count and --start must be nonnegative", EXIT_CONFIG)
    out = Path(args.out)
    write_dataset(cfg.scene, args.count, out, start=args.start)
    runconfig.echo(cfg, out)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_fill(args) -> int:
    cfg = _load_config(args.config)
    tol = args.tol if args.tol is not None else cfg.fill.tol
    neighbors = args.neighbors if args.neighbors is not None else cfg.fill.neighbors
    src, out = Path(args.inp), Path(args.out)
    if not src.is_dir():
        raise CliError(f"input directory {src} does not exist", EXIT_IO)
    dirs = sorted(p for p in src.iterdir() if p.is_dir() and p.name.startswith("sample_"))

    def one(d):
        s = read_sample(d)
        filled = fill_depth(s.depth_raw, normalize_ir(s.ir), neighbors, tol, jacobi=cfg.fill.jacobi)
        (out / d.name).mkdir(parents=True, exist_ok=True)
        write_pfm(out / d.name / "depth_filled.pfm", filled)
        return int(s.mask_missing.sum())

    out.mkdir(parents=True, exist_ok=True)
    holes = parallel_map(one, dirs)
    cfg = dataclasses.replace(cfg, fill=runconfig.FillConfig(tol, neighbors, cfg.fill.jacobi))
    runconfig.echo(cfg, out)
    print(f"filled {sum(holes)} missing pixels across {len(dirs)} samples into {out}")
    return EXIT_OK


def train_one(cfg: runconfig.RunConfig, mode: str, samples, out_dir: Path, test=None) -> dict:
    """Train one conv mode; writes checkpoint and history, returns a summary record."""
    out_dir.mkdir(parents=True, exist_ok=True)
    model = net.build_model(dataclasses.replace(cfg.network, conv_mode=mode))
    model.preprocess = cfg.preprocess
    last = {}
    with open(out_dir / HISTORY, "w", encoding="utf-8") as hist:

        def log(step, report):
            hist.write(net.history_line(step, report) + "\n")
            last.update(report, step=step)

        t = cfg.train
        net.train(model, samples, t.epochs, t.batch_size, t.learning_rate, t.lambda_depth, seed=cfg.seed, pre=cfg.preprocess, on_step=log,
                  schedule=t.schedule, flip=t.flip, balance=t.balance)
    net.save_checkpoint(out_dir / CHECKPOINT, model)
    record = {"mode": mode, "params": net.count_params(model), "steps": last.get("step", 0)}
    if last:
        record.update({k: last[k] for k in ("seg_loss", "depth_loss", "total")})
    if test is not None:
        record["test"] = compute_all(net.evaluate(model, test))
    return record


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    samples = _samples(args.data)
    test = _samples(args.test, "test") if args.test else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runconfig.echo(cfg, out)
    modes = cfg.modes()
    records = []
    for mode in modes:
        mode_dir = out / mode if len(modes) > 1 else out
        rec = train_one(cfg, mode, samples, mode_dir, test)
        records.append(rec)
        line = f"{mode}: {rec['steps']} steps, {rec['params']} params"
        if "test" in rec:
            line += f", test mIoU {rec['test']['mean_iou']:.2f}"
        print(line)
    if len(modes) > 1 or test is not None:
        with open(out / COMPARISON, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = net.load_checkpoint(args.ckpt)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.ckpt}: {exc.strerror}", EXIT_IO) from None
    samples = _samples(args.data)
    cm = net.evaluate(model, samples, ignore_id=args.ignore_id)
    metrics = compute_all(cm)
    print(format_report(metrics), end="")
    if args.report:
        Path(args.report).write_text(format_record(metrics) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.op, args.trials, args.tol, args.seed, args.alpha)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irdseg", description="IR-D segmentation with depth-aware shape convolutions.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--start", type=int, default=0, help="index of the first scene")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fill", help="fill missing depth guided by IR")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--tol", type=float)
    f.add_argument("--neighbors", type=int, choices=(4, 8))
    f.add_argument("--config")
    f.set_defaults(func=cmd_fill)

    t = sub.add_parser("train", help="train the multi-task network")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--test", help="held-out dataset scored after training")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", help="write the metric record here")
    e.add_argument("--ignore-id", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of operator gradients")
    c.add_argument("--op", choices=OPS, required=True)
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--alpha", type=float, default=1.0)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except runconfig.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ImageFormatError, TensorFormatError, net.CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConvergenceError, UnsolvableRegionError, net.NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
