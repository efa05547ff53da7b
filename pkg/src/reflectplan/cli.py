"""Command-line entry point.

Subcommands: ``run``, ``sweep``, ``ablate``, ``analyze``, ``validate-config``.

Exit codes:

    0  success
    2  usage error (bad arguments, empty sweep values)
    3  invalid configuration
    4  corrupt or truncated episode log
    5  LLM endpoint unavailable
    6  simulation or planning error
    7  file-system error
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import BASELINES, load_config
from .errors import AdapterUnavailable, ConfigError, CorruptLog, ReflectPlanError
from .loop import ABLATIONS

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CORRUPT_LOG = 4
EXIT_ADAPTER = 5
EXIT_RUNTIME = 6
EXIT_IO = 7

log = logging.getLogger("reflectplan")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="semisim-v1", help="bundled config name or path to a JSON config")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--episodes", type=int, help="number of episodes")
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--baseline", choices=BASELINES)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=None, help="repeatable")
    p.add_argument("--wm-mode", choices=("oracle", "learned"))
    p.add_argument("--horizon", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--actor", choices=("parametric", "llm"))
    p.add_argument("--critic", choices=("scripted", "llm"))
    p.add_argument("--llm-endpoint")
    p.add_argument("--llm-key-env")
    p.add_argument("--llm-model")


def _overrides(args) -> dict:
    llm = {
        k: v
        for k, v in (("endpoint", args.llm_endpoint), ("key_env", args.llm_key_env), ("model", args.llm_model))
        if v is not None
    }
    return {
        "seed": args.seed,
        "episodes": args.episodes,
        "baseline": args.baseline,
        "ablations": tuple(args.ablate) if args.ablate else None,
        "wm_mode": args.wm_mode,
        "horizon": args.horizon,
        "workers": args.workers,
        "actor": args.actor,
        "critic": args.critic,
        "llm": llm or None,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reflectplan", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a batch of episodes")
    _common(p)

    p = sub.add_parser("ablate", help="full planner plus one arm per ablation flag")
    _common(p)
    p.add_argument("flags", nargs="*", metavar="FLAG", help=f"subset of {', '.join(ABLATIONS)} (default: all)")

    p = sub.add_parser("sweep", help="sensitivity sweep over N or K")
    _common(p)
    p.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated integers, e.g. 1,3,5,10")

    p = sub.add_parser("analyze", help="regenerate CSV artifacts from a run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("validate-config", help="resolve and print a config")
    _common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(parser, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptLog as exc:
        print(f"corrupt log: {exc}", file=sys.stderr)
        return EXIT_CORRUPT_LOG
    except AdapterUnavailable as exc:
        print(f"llm unavailable: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except ReflectPlanError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def _dispatch(parser, args) -> int:
    if args.command == "analyze":
        harness.analyze(args.run_dir)
        print(args.run_dir)
        return EXIT_OK

    cfg = load_config(args.config, _overrides(args))
    if args.command == "validate-config":
        sys.stdout.write(cfg.to_json())
        return EXIT_OK
    if args.command == "run":
        result = harness.run(cfg, args.out)
        print(result.run_dir)
        return EXIT_OK
    if args.command == "ablate":
        bad = sorted(set(args.flags) - set(ABLATIONS))
        if bad:
            parser.error(f"unknown ablation flag(s) {bad}; choose from {', '.join(ABLATIONS)}")
        root, summary = harness.ablate(cfg, args.flags or list(ABLATIONS), args.out)
        for row in summary:
            print(json.dumps(row, sort_keys=True))
        print(root)
        return EXIT_OK
    if args.command == "sweep":
        try:
            values = [int(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            parser.error("--values must be comma-separated integers")
        if not values:
            print("sweep needs at least one value", file=sys.stderr)
            return EXIT_USAGE
        root, rows = harness.sweep(cfg, args.param, values, args.out)
        for row in rows:
            print(json.dumps(row, sort_keys=True))
        print(root)
        return EXIT_OK
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
