"""Command-line front end.

    meshpose gen    --config FILE [--seed N] [--out DIR]
    meshpose train  --config FILE [--seed N] [--out DIR]
    meshpose merge  --config FILE [--seed N] [--out DIR]
    meshpose infer  --config FILE [--seed N] [--out DIR]
    meshpose eval   --config FILE [--seed N] [--out DIR] [--anchor ID]
    meshpose run    --config FILE [--seed N] [--out DIR] [--anchor ID]
    meshpose report --report FILE [--svg FILE]

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .errors import ConfigError, MeshPoseError, StageError

STAGE_COMMANDS = {
    "gen": pipeline.cmd_gen,
    "train": pipeline.cmd_train,
    "merge": pipeline.cmd_merge,
    "infer": pipeline.cmd_infer,
    "eval": pipeline.cmd_eval,
    "run": pipeline.cmd_run,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshpose",
                                description="desk-scale neural-mesh pose pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="pipeline config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=None, help="override output directory")
        if name in ("eval", "run"):
            sp.add_argument("--anchor", default=None,
                            help="alignment anchor image id (overrides infer.anchor)")
    rp = sub.add_parser("report")
    rp.add_argument("--report", required=True, help="metrics.json produced by eval")
    rp.add_argument("--svg", default=None, help="also write an SVG histogram here")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            print(pipeline.cmd_report(args.report, args.svg))
            return 0
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if getattr(args, "anchor", None) is not None:
            overrides["infer"] = {"anchor": args.anchor}
        cfg = pipeline.load_config(args.config, overrides)
        artifact = STAGE_COMMANDS[args.command](cfg)
        print(f"{args.command}: wrote {artifact}")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except MeshPoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
