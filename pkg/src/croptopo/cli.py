"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation error (bad config/inputs), 2 runtime
error.  Every stage writes a machine-readable run record under
<out>/runrecords/.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .pipeline import RUN_ALL_ORDER, STAGE_FUNCS, ExperimentConfig, Workspace, run_all


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="croptopo",
        description="Early-season crop mapping via cluster-topology label transfer",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    stage_names = list(STAGE_FUNCS) + ["run-all"]
    for name in stage_names:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's global seed")
    # `baseline boundary|postseason|harmonic` rides through the same parsers
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # accept `baseline boundary` as an alias for `baseline-boundary`
    if len(argv) >= 2 and argv[0] == "baseline" and argv[1] in ("boundary", "postseason",
                                                                "harmonic"):
        argv[0:2] = [f"baseline-{argv[1]}"]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        ws = Workspace(cfg, Path(args.out))
        ws.out.mkdir(parents=True, exist_ok=True)
        ws.write_config()
        if args.command == "run-all":
            results = run_all(ws)
            summary = results["evaluate"]
            print(json.dumps({k: summary.get(k) for k in
                              ("best_oa_main", "best_oa_boundary", "earliest_step_085")},
                             indent=2))
        else:
            record = STAGE_FUNCS[args.command](ws)
            print(json.dumps({"stage": record["stage"],
                              "config_hash": record["config_hash"]}, indent=2))
        return 0
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
