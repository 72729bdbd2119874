"""Command-line harness: ``shpeft <subcommand> --config run.yaml [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

STAGES = {
    "gen-data": pipeline.gen_data,
    "pretrain": pipeline.pretrain,
    "shpeft": pipeline.shpeft,
    "baselines": pipeline.baselines,
    "analyze": pipeline.analyze,
    "run-all": pipeline.run_all,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML file")
    common.add_argument("--out", type=Path, help="run directory (overrides SHPEFT_OUT and output_dir)")
    common.add_argument("--seed-offset", type=int, default=0, help="added to every seed in the config")
    common.add_argument("--threads", type=int, default=1, help="parallel (task, seed) cells")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shpeft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write the task family (or copied IDX data) into the run directory",
        "pretrain": "train the base model on the base task with a full mask",
        "shpeft": "score, select top-k and fine-tune every downstream task",
        "baselines": "fixed-mask selective baselines (full, head-only, bias-only, ...)",
        "analyze": "sparsity curves and cross-task overlap from stored bundles",
        "run-all": "gen-data, pretrain, baselines, shpeft, analyze and report in sequence",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    rp = sub.add_parser("report", parents=[common], help="aggregate seeds into summary CSVs")
    rp.add_argument("run_dir", nargs="?", type=Path)
    return parser


def resolve_out(args, cfg_output: str | None) -> Path:
    if args.out is not None:
        return args.out
    env = os.environ.get("SHPEFT_OUT")
    if env:
        return Path(env)
    return Path(cfg_output or "runs/default")


def _setup_logging(out: Path | None, verbose: bool) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.FileHandler(out / "log.txt"))
        except OSError:
            pass
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", handlers=handlers, force=True)
    logging.getLogger("shpeft").setLevel(logging.INFO)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            run_dir = args.run_dir or resolve_out(args, None)
            if not Path(run_dir).is_dir():
                print(f"error: run directory {run_dir} does not exist", file=sys.stderr)
                return EXIT_CONFIG
            try:
                pipeline.report(run_dir)
            except FileNotFoundError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            return EXIT_OK
        if args.config is None:
            raise ConfigError("--config is required")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        out = resolve_out(args, cfg.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        _setup_logging(out, args.verbose)
        run = pipeline.Run(cfg, out, args.seed_offset, args.threads)
        STAGES[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
