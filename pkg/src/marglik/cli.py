"""``marglik grid|pareto|train|check --config <path> [--out <dir>] [--seed <u64>]``"""
from __future__ import annotations

import argparse
import sys

from . import config, harness
from .errors import MargLikError


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marglik", description="Linearized-Laplace marginal likelihood bounds")
    parser.add_argument("command", choices=["grid", "pareto", "train", "check"])
    parser.add_argument("--config", help="JSON run configuration (optional for check)")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=_u64, help="global seed (overrides seed)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is None:
            if args.command != "check":
                print(f"marglik {args.command}: --config is required", file=sys.stderr)
                return 2
            cfg = None
        else:
            cfg = config.load(args.config)
            if args.seed is not None:
                cfg["seed"] = args.seed
            if args.out is not None:
                cfg["output_dir"] = args.out
        if args.command == "check":
            return harness.cmd_check(cfg)
        if args.command == "grid":
            print(harness.cmd_grid(cfg))
        elif args.command == "pareto":
            print(harness.cmd_pareto(cfg))
        else:
            csv_path, state_path = harness.cmd_train(cfg)
            print(csv_path)
            print(state_path)
    except (MargLikError, OSError) as err:
        print(f"marglik {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
