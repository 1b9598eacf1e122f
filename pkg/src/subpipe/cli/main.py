"""Command-line entry point: ``subpipe <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from ..errors import SubpipeError
from .config import RunConfig, emit_config, load_config
from .experiments import cmd_compare_codecs, cmd_error_accum, cmd_rank_diag, cmd_train

COMMANDS = {
    "train": cmd_train,
    "compare-codecs": cmd_compare_codecs,
    "rank-diag": cmd_rank_diag,
    "error-accum": cmd_error_accum,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subpipe", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS) + ["show-config"])
    parser.add_argument("--config", help="JSON run config; flags below override it")
    parser.add_argument("--mode", help="compressed | uncompressed | lossy:<topk|quant|svd>:<ratio>")
    parser.add_argument("--stages", type=int)
    parser.add_argument("--tcp", help="'loopback' or host:port[,host:port...], one per adjacent stage pair")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--realtime", action="store_true", default=None, help="sleep for simulated transfer delays")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--corpus", help="text file used as a byte-level token stream")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--trials", type=int, help="trial count for error-accum")
    parser.add_argument("--checkpoint", help="resume train from this checkpoint")
    parser.add_argument("--dump-frames", action="store_true", default=None,
                        help="write the first step's wire frames to frames.bin")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {name: getattr(args, name) for name in
                 ("mode", "stages", "tcp", "seed", "realtime", "out", "corpus", "trials", "checkpoint", "dump_frames")}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, plan=dataclasses.replace(cfg.plan, steps=args.steps))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(emit_config(cfg))
            return 0
        result = COMMANDS[args.command](cfg)
    except SubpipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(" ".join(f"{k}={v}" for k, v in result.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
