"""Command line: ``ctxfer pretrain | run | verify``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import STRATEGIES, ExperimentConfig, _fmt, emit_outputs, pretrain_sources, run_trial
from .core import CtxferError
from .envs import ENV_IDS


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxfer", description="Contextual policy transfer experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="train source policies and dynamics, write a bundle")
    pre.add_argument("--env", required=True, choices=ENV_IDS)
    pre.add_argument("--out", required=True, type=Path)
    pre.add_argument("--seed", type=int, default=0)

    run = sub.add_parser("run", help="run trials of one strategy and write curves")
    run.add_argument("--env", choices=ENV_IDS)
    run.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)} or phi<i>")
    run.add_argument("--trials", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--sources", type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")

    sub.add_parser("verify", help="check the learning code against independent oracles")
    return p


def _run_config(args) -> ExperimentConfig:
    base = json.loads(args.config.read_text()) if args.config else {}
    env = args.env or base.get("env")
    if env is None:
        raise SystemExit("ctxfer run: --env is required (or set it in --config)")
    merged = ExperimentConfig.for_env(env).to_dict()
    merged.update(base)
    flags = {"env": args.env, "strategy": args.strategy, "trials": args.trials,
             "steps": args.steps, "seed": args.seed,
             "sources": str(args.sources) if args.sources else None}
    merged.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig.from_dict(merged)


def write_summary(records, path: Path) -> None:
    """Across-trial mean and standard error of the per-trial curves."""
    steps = [row[0] for row in records[0].rows]
    vals = np.array([[row[1] for row in rec.rows] for rec in records])
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(len(records)) if len(records) > 1 else np.zeros_like(mean)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["steps", "metric_mean", "metric_stderr"])
        for k, m, e in zip(steps, mean, se):
            w.writerow([_fmt(k), _fmt(float(m)), _fmt(float(e))])


def cmd_pretrain(args) -> int:
    out = pretrain_sources(args.env, args.out, seed=args.seed)
    print(f"wrote source bundle to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _run_config(args)
    cfg.validate()
    records = []
    for k in range(cfg.trials):
        rec = run_trial(cfg, k)
        emit_outputs(rec, args.out / f"trial_{k:03d}")
        records.append(rec)
        print(f"trial {k}: final metric {rec.final_metric():g} ({rec.wall_clock:.1f} s)")
    if records and records[0].rows:
        write_summary(records, args.out / "curve.csv")
    return 0


def cmd_verify(args) -> int:
    from .checks import run_all

    results = run_all()
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"pretrain": cmd_pretrain, "run": cmd_run, "verify": cmd_verify}
    try:
        return handlers[args.command](args)
    except CtxferError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
