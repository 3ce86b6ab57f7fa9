"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import default_config_text, load_config, parse_config
from .errors import CommunityPollError, ConfigError, ProviderError, RunError, StageOrderError
from .pipeline import ORDER, Pipeline

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_STAGE_ORDER, EXIT_PROVIDER = 0, 1, 2, 3, 4

log = logging.getLogger("communitypoll")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="communitypoll",
                                     description="Poll census-calibrated synthetic residents about a data center.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration YAML (default: packaged baseline)")
    common.add_argument("--force", action="store_true", help="rerun even if the stage is up to date")
    common.add_argument("--cache-dir", help="census cache directory (overrides paths.cache_dir)")
    common.add_argument("--out", help="output directory (overrides paths.out_dir)")

    for name in ORDER:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    sub.add_parser("default-config", help="print the baseline configuration")
    return parser


def _config(args):
    if args.config is None:
        cfg = parse_config(default_config_text(), "<default config>", Path.cwd())
    else:
        cfg = load_config(args.config)
    return cfg.with_overrides(cache_dir=args.cache_dir, out_dir=args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "default-config":
        sys.stdout.write(default_config_text())
        return EXIT_OK
    try:
        pipeline = Pipeline(_config(args))
        stages = ORDER if args.command == "run" else (args.command,)
        for name in stages:
            outcome = pipeline.run(name, force=args.force)
            print(f"{name}: {outcome}")
        if "report" in stages:
            print((pipeline.out / "report" / "summary.txt").read_text(encoding="utf-8"), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_ORDER
    except (ProviderError, RunError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except CommunityPollError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
