"""Command line entry point: ``ntkrecon <verb> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys

import numpy as np

from . import experiments as ex
from .config import ConfigError, load_config
from .data import DataFormatError, DataUnavailable
from .fileio import FormatError

VERBS = ("train", "attack", "sweep", "onion", "distill", "retrain", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntkrecon", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--resume", action="store_true", help="skip stages already recorded in the manifest")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bitwise repeatability")
    p.add_argument("--checkpoint", help="checkpoint for 'attack' (default: <out>/train_s<seed>.ckpt)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _blas_guard(deterministic):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def run(args) -> object:
    overrides = {"seeds": args.seed} if args.seed else None
    cfg = load_config(args.config, args.profile, overrides)
    with _blas_guard(args.deterministic):
        if args.verb == "train":
            return ex.cmd_train(cfg, args.out, args.resume)
        if args.verb == "attack":
            return ex.cmd_attack(cfg, args.out, args.resume, args.checkpoint)
        if args.verb == "sweep":
            return ex.cmd_sweep(cfg, args.out, args.resume)
        if args.verb == "onion":
            return ex.cmd_onion(cfg, args.out, args.resume)
        if args.verb == "distill":
            return ex.cmd_distill(cfg, args.out, args.resume)
        if args.verb == "retrain":
            return ex.cmd_retrain(cfg, args.out, args.resume)
        return ex.cmd_report(cfg, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = run(args)
    except (ConfigError, DataUnavailable, DataFormatError, FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ex.NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if isinstance(result, str):
        print(result)
    else:
        print(json.dumps(result, indent=1, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
