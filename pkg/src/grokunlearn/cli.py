"""Command-line entry point: ``grokunlearn <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import harness as hs
from . import modsim
from . import train as tr


def _load(args) -> hs.ExperimentConfig:
    cfg = hs.ExperimentConfig.from_yaml(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _load(args)
    train_set, test_set = hs.build_data(cfg.dataset)
    root = cfg.out()
    for seed in cfg.seeds:
        run = hs.train_seed(cfg, seed, train_set, test_set, root)
        print(json.dumps({"seed": seed, **asdict(run.report), "gap": run.report.gap}))
    return 0


def _run_grid(args, only=None) -> int:
    cfg = _load(args)
    store = hs.run_experiment(cfg, workers=args.workers, only=only)
    counts: dict = {}
    for r in store.records:
        counts[r.status] = counts.get(r.status, 0) + 1
    print(json.dumps({"records": len(store), "config_hash": hs.config_hash(cfg), **counts}))
    return 1 if hs.has_failures(store) else 0


def cmd_unlearn(args) -> int:
    only = {}
    if args.algorithm:
        only["algorithm"] = args.algorithm
    if args.checkpoint:
        only["checkpoint"] = args.checkpoint
    return _run_grid(args, only or None)


def cmd_sweep(args) -> int:
    return _run_grid(args)


def cmd_eval(args) -> int:
    """Accuracy and grokking summary of each trained seed's selected checkpoints."""
    cfg = _load(args)
    train_set, test_set = hs.build_data(cfg.dataset)
    for seed in cfg.seeds:
        run = hs.train_seed(cfg, seed, train_set, test_set, cfg.out())
        for sel in ("pre", "grok", "final"):
            step = hs.resolve_checkpoint(run, sel)
            if step is None:
                print(json.dumps({"seed": seed, "checkpoint": sel, "status": "unavailable"}))
                continue
            p = run.checkpoints[step]
            tr_acc = tr.evaluate(run.spec, p, train_set)[0]
            te_acc = tr.evaluate(run.spec, p, test_set)[0]
            print(json.dumps({"seed": seed, "checkpoint": sel, "step": step, "train_acc": tr_acc, "test_acc": te_acc}))
    return 0


def cmd_theory_sim(args) -> int:
    seed = 0 if args.seed is None else args.seed
    cfgs = [
        modsim.ModularModelCfg(m=args.m, d=args.d, p=p, rho=r, sigma=args.sigma, n_pairs=args.n_pairs, seed=seed)
        for p in args.p for r in args.rho
    ]
    out = Path(args.out or hs.default_out())
    out.mkdir(parents=True, exist_ok=True)
    rows = modsim.sweep(cfgs, out / "theory_sim.csv")
    for r in rows:
        print(json.dumps(r))
    return 0


def cmd_report(args) -> int:
    cfg = _load(args)
    store = hs.ResultsStore(cfg.out() / "records.jsonl")
    if not len(store):
        print("no records", file=sys.stderr)
        return 1
    kinds = args.kind or list(hs.REPORT_KINDS)
    for kind in kinds:
        print(hs.emit_report(store, kind, cfg.out() / "reports"))
    hs.export_records_csv(store, cfg.out() / "reports" / "records.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grokunlearn", description="grokking vs. unlearning experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--out", help=f"output directory (default: ${hs.OUT_ENV} or ./runs)")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--seed", type=int, default=None, help="run a single seed")
        return p

    common(sub.add_parser("train", help="train every seed, persist checkpoints")).set_defaults(fn=cmd_train)
    p = common(sub.add_parser("unlearn", help="run (part of) the unlearning grid"))
    p.add_argument("--algorithm", action="append")
    p.add_argument("--checkpoint", action="append")
    p.set_defaults(fn=cmd_unlearn)
    common(sub.add_parser("eval", help="accuracies at pre/grok/final checkpoints")).set_defaults(fn=cmd_eval)
    common(sub.add_parser("sweep", help="run the full grid, resuming if interrupted")).set_defaults(fn=cmd_sweep)
    p = common(sub.add_parser("report", help="write report CSVs from the record log"))
    p.add_argument("--kind", action="append", choices=hs.REPORT_KINDS)
    p.set_defaults(fn=cmd_report)
    p = common(sub.add_parser("theory-sim", help="Monte Carlo gradient-correlation grid"), config=False)
    p.add_argument("--p", type=float, nargs="+", default=[0.1, 0.5, 1.0])
    p.add_argument("--rho", type=float, nargs="+", default=[0.5, 0.9, 1.0])
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--d", type=int, default=8192)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--n-pairs", type=int, default=2000)
    p.set_defaults(fn=cmd_theory_sim)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
