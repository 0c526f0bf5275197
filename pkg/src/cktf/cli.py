"""Command-line entry point: ``cktf <subcommand> [--config FILE] [--set key=value ...]``.

Exit status is 0 on success, 2 for invalid arguments or configuration and
1 for failures while running (including a failed self-check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import CKTFError, ConfigError

COMMAND_MODES = {
    "train-teacher": "train_teacher",
    "distill": "distill",
    "transfer-distill": "transfer_distill",
    "finetune": "finetune_linear",
    "eval": "eval",
}
CHECK_COMMANDS = ("gradcheck", "oracle-check")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cktf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMAND_MODES:
        p = sub.add_parser(name, help=f"run the {COMMAND_MODES[name]} mode")
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--out", help="output directory (same as --set out_dir=...)")
    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op and the full loss")
    g.add_argument("--seed", type=int, default=0)
    o = sub.add_parser("oracle-check", help="contrastive losses against direct summation, plus analytic anchors")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--instances", type=int, default=50)
    return parser


def _run_checks(args) -> int:
    from .suites import gradcheck_suite, oracle_suite

    results = gradcheck_suite(args.seed) if args.command == "gradcheck" else oracle_suite(args.instances, args.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in CHECK_COMMANDS:
        return _run_checks(args)

    from .experiments import run

    try:
        fixed = {"mode": COMMAND_MODES[args.command]}
        if args.out:
            fixed["out_dir"] = args.out
        cfg = load_config(args.config, args.set, **fixed)
        cfg.validate_for_mode()
    except ConfigError as exc:
        print(f"cktf: config error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run(cfg)
    except ConfigError as exc:
        print(f"cktf: config error: {exc}", file=sys.stderr)
        return 2
    except (CKTFError, OSError) as exc:
        print(f"cktf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if isinstance(result, dict):
        print(json.dumps(result, sort_keys=True))
    else:
        acc = "NA" if result.final_test_acc is None else f"{result.final_test_acc:.4f}"
        print(f"{cfg.mode}: {len(result.metrics)} epochs, final test accuracy {acc}; outputs in {cfg.out_dir}")
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
