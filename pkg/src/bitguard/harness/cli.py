"""Command-line entry point for experiment runs.

Exit codes: 0 success, 2 configuration problem, 1 runtime failure.
Errors are emitted to stderr as a single JSON object so CI can parse them.
"""

import argparse
import json
import sys
from typing import List, Optional

from ..errors import BitguardError, ConfigError
from .config import load_config
from .experiments import STAGES, run_experiment
from .reports import canonical_json


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bitguard",
        description="Run staged bit-flip attack and defense experiments.")
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--seed", type=int, action="append", default=None,
                   help="run only this seed (repeatable)")
    p.add_argument("--out-dir", help="report output directory")
    p.add_argument("--stage", choices=STAGES, default="report",
                   help="run the pipeline through this stage")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes for the seed fan-out")
    p.add_argument("--no-write", action="store_true",
                   help="compute the report but write no files")
    return p


def _fail(exc: Exception, code: int) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seeds"] = args.seed
        if args.out_dir is not None:
            overrides["out_dir"] = args.out_dir
        config = load_config(args.config, overrides=overrides)
    except ConfigError as exc:
        return _fail(exc, 2)

    try:
        write = not args.no_write
        report = run_experiment(config, stage=args.stage, jobs=args.jobs,
                                write=write)
    except ConfigError as exc:
        return _fail(exc, 2)
    except BitguardError as exc:
        return _fail(exc, 1)

    sys.stdout.write(canonical_json({
        "config_hash": report.config_hash,
        "stage": args.stage,
        "seeds": config.seeds,
        "rows": len(report.rows),
        "aggregates": report.aggregates,
        "out_dir": config.out_dir if write else None,
    }))
    return 0


if __name__ == "__main__":
    sys.exit(main())
