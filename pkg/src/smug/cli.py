"""Command-line entry point: ``smug <subcommand> --config run.ini [...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig
from .errors import SmugError
from .pipeline import OUT_ENV, Run, default_out_root, report
from .recon import METHODS
from .robustness import SWEEP_KINDS

DEFAULT_GRIDS = {
    "epsilon": "0,0.005,0.01,0.02,0.05",
    "sigma": "0.005,0.01,0.02,0.05",
    "accel": "2,4,8",
    "unroll_steps": "4,8,12,16",
    "mc_samples": "1,2,4,8,16",
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def _methods(text: str) -> tuple:
    ms = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in ms if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {METHODS}")
    return ms


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smug", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_run(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="INI experiment config")
        s.add_argument("--out", help=f"run directory (default: ${OUT_ENV}/<config hash>)")
        s.add_argument("--seed", type=int, help="override the master seed")
        return s

    with_run("gen-data", "synthesize phantoms and measurements")
    s = with_run("pretrain", "denoiser pre-training")
    s.add_argument("--kind", choices=("smooth", "plain"), default="smooth")
    s = with_run("finetune", "train one reconstruction method")
    s.add_argument("--mode", choices=METHODS, required=True)
    s = with_run("eval", "clean, noisy and worst-case metrics on the test split")
    s.add_argument("--methods", type=_methods)
    s.add_argument("--items", type=int)
    s = with_run("attack", "PGD perturbations for one method")
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--items", type=int)
    s = with_run("sweep", "evaluate over a grid of one quantity")
    s.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    s.add_argument("--grid", type=_floats)
    s.add_argument("--methods", type=_methods)
    s.add_argument("--items", type=int)
    s = with_run("bound-check", "audit the smoothing robustness certificate")
    s.add_argument("--items", type=int, default=2)
    s.add_argument("--random", type=int, default=100, help="random perturbations per item")

    s = sub.add_parser("report", help="aggregate result CSVs into a long-format table")
    s.add_argument("root", help="directory to scan")
    s.add_argument("--out", help="output CSV (default: <root>/report.csv)")
    s.add_argument("--allow-mixed", action="store_true", help="combine results from different configs")

    sub.add_parser("default-config", help="print the default config")
    return p


def _run(args) -> Run:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    root = Path(args.out) if args.out else default_out_root() / cfg.config_hash[:12]
    return Run(cfg, root)


def dispatch(args) -> int:
    if args.command == "default-config":
        print(ExperimentConfig().to_ini())
        return 0
    if args.command == "report":
        print(report(args.root, args.out, args.allow_mixed))
        return 0
    run = _run(args)
    with run.command(args.command, argv=sys.argv[1:]):
        if args.command == "gen-data":
            run.gen_data()
            out = run.data_dir
        elif args.command == "pretrain":
            out = run.pretrain(args.kind)
        elif args.command == "finetune":
            out = run.finetune(args.mode)
        elif args.command == "eval":
            out = run.evaluate(args.methods, args.items)
        elif args.command == "attack":
            out = run.attack(args.method, args.items)
        elif args.command == "sweep":
            grid = args.grid or _floats(DEFAULT_GRIDS[args.kind])
            out = run.sweep(args.kind, grid, args.methods, args.items)
        elif args.command == "bound-check":
            out = run.bound_check(args.items, args.random)
    print(out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return dispatch(args)
    except SmugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
