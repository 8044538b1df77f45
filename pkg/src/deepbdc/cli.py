"""
Command-line entry point.

Subcommands: ``bdc``, ``simstudy``, ``train``, ``eval`` and ``gradcheck``.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Failures print exactly one line to stderr::

    error[<category>]: <message>

The evaluation thread count comes from ``--threads`` or the
``DEEPBDC_THREADS`` environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiment, formats, gradcheck, kernel, simstudy
from .errors import BdcError, ConfigError

EXIT_CODES = {"config": 2, "data": 3, "numeric": 4}


def _out(path):
    if path is None or path == "-":
        return sys.stdout
    return open(path, "w", newline="")


def _config_line(cfg: dict) -> str:
    return "# config=" + json.dumps(cfg, sort_keys=True) + "\n"


def cmd_bdc(args) -> int:
    x = formats.load_matrix(args.input)
    y = None
    if args.y is not None:
        y = formats.load_matrix(args.y)
    elif args.split is not None or args.stat in ("bdcorr", "value", "corr"):
        k = args.split if args.split is not None else x.shape[1] // 2
        if not 0 < k < x.shape[1]:
            raise ConfigError(f"--split must lie in 1..{x.shape[1] - 1}")
        x, y = x[:, :k], x[:, k:]
    dtype = np.float32 if args.float32 else np.float64
    fh = _out(args.output)
    try:
        if args.stat == "matrix":
            formats.write_csv_matrix(kernel.bdc_matrix(x, dtype=dtype), fh)
        elif args.stat == "vector":
            formats.write_csv_matrix(kernel.vectorize(kernel.bdc_matrix(x, dtype=dtype),
                                                      scaled=not args.unscaled), fh)
        elif args.stat == "bdcorr":
            fh.write(f"{float(kernel.bdcorr(x, y))!r}\n")
        elif args.stat == "value":
            if x.shape[0] != y.shape[0]:
                raise ConfigError("paired sets must have the same number of rows")
            fh.write(f"{float(kernel.bdc_value(kernel.bdc_matrix(x), kernel.bdc_matrix(y)))!r}\n")
        elif args.stat == "corr":
            fh.write(f"{float(kernel.pearson_corr(x, y))!r}\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_simstudy(args) -> int:
    cfg = formats.load_config(args.config, args.set)
    specs = simstudy.default_specs(cfg["simstudy.n"], cfg["simstudy.noise"],
                                   cfg["simstudy.seed"], cfg["simstudy.slopes"])
    rows = simstudy.run_study(specs)
    echo = {k: v for k, v in cfg.items() if k.startswith("simstudy.")}
    fh = _out(args.output)
    try:
        fh.write(_config_line(echo))
        fh.write(simstudy.rows_to_csv(rows))
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.samples_dir:
        d = Path(args.samples_dir)
        d.mkdir(parents=True, exist_ok=True)
        for spec in specs:
            x, y = simstudy.generate_relation(spec)
            (d / f"{spec.label}.csv").write_text(simstudy.samples_to_csv(x, y))
    return 0


def cmd_train(args) -> int:
    cfg = formats.load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = experiment.train(cfg)
    digest = formats.save_checkpoint(out / "checkpoint.bdcp", result.state, cfg)
    with open(out / "loss.csv", "w", newline="") as fh:
        fh.write(_config_line(cfg))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(result.loss_history):
            writer.writerow([i, repr(float(loss))])
    summary = {
        "config": cfg,
        "checkpoint_sha256": digest,
        "final_loss": result.loss_history[-1] if result.loss_history else None,
        "val_history": result.val_history,
        "train_accuracy": result.train_accuracy,
        "best_epoch": result.best_epoch,
    }
    (out / "train.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"checkpoint {out / 'checkpoint.bdcp'} sha256={digest}")
    return 0


def cmd_eval(args) -> int:
    model = None
    digest = None
    base = {}
    if args.checkpoint:
        model, base, digest = formats.load_checkpoint(args.checkpoint)
    if args.config:
        # fields from --config take precedence over the checkpoint's echo
        base = {**base, **formats.read_config_file(args.config)}
    cfg = formats.build_config(base, args.set)
    report = experiment.evaluate(cfg, model, threads=args.threads)
    report.config = {**cfg, "checkpoint_sha256": digest}
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new:
                writer.writerow(["pipeline", "head", "n_way", "k_shot", "episodes", "mean", "ci95"])
            writer.writerow([cfg["pipeline"], cfg["head"], cfg["task.n_way"], cfg["task.k_shot"],
                             report.n_episodes, repr(float(report.mean)), repr(float(report.ci95))])
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seeds, step=args.step)
    worst = max(r.max_error for r in results)
    for r in results:
        if args.verbose:
            print(f"seed={r.seed} axis={r.axis} " + " ".join(f"{k}={v:.3e}" for k, v in r.errors.items()))
    print(f"max_relative_error={worst:.3e} cases={len(results)} tolerance={args.tol:g}")
    return 0 if worst < args.tol else EXIT_CODES["numeric"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepbdc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bdc", help="BDC matrix, vector, value or correlation of observation sets")
    p.add_argument("input", help="headerless CSV or BDCK tensor (rows are observations)")
    p.add_argument("--y", help="second observation set for paired statistics")
    p.add_argument("--split", type=int, help="columns [0, k) are x, the rest y")
    p.add_argument("--stat", choices=("matrix", "vector", "bdcorr", "value", "corr"), default="matrix")
    p.add_argument("--unscaled", action="store_true", help="raw upper triangle (no sqrt(2) scaling)")
    p.add_argument("--float32", action="store_true", help="compute in 32-bit floats")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bdc)

    def with_config(p):
        p.add_argument("--config", help="JSON run config with flat dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field (repeatable)")

    p = sub.add_parser("simstudy", help="Corr vs BDCorr on synthetic relations")
    with_config(p)
    p.add_argument("-o", "--output")
    p.add_argument("--samples-dir", help="also write per-shape sample CSVs here")
    p.set_defaults(func=cmd_simstudy)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    with_config(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate on meta-test episodes, print an EvalReport")
    with_config(p)
    p.add_argument("--checkpoint", help="checkpoint from `train`; fresh model when omitted")
    p.add_argument("--threads", type=int)
    p.add_argument("-o", "--output")
    p.add_argument("--csv", help="append a summary row to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the layer gradients")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BdcError as exc:
        msg = " ".join(str(exc).split())
        print(f"error[{exc.category}]: {msg}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error[data]: {msg}", file=sys.stderr)
        return EXIT_CODES["data"]
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_CODES["numeric"]


if __name__ == "__main__":
    sys.exit(main())
