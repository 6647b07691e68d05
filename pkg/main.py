"""
Main entrypoint for the partially observed FBSDE control solver.

Parses the command line and runs one workflow subcommand:

    python main.py benchmark --config config/lqg_benchmark.yaml --set monte_carlo.paths=40000
"""
import argparse
import sys

from agents.workflow import EXIT_USAGE, run
from config.settings import print_settings

SUBCOMMANDS = ("simulate", "solve", "optimize", "verify", "benchmark")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Monte Carlo solver for partially observed FBSDE optimal control")
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="workflow to run")
    parser.add_argument("--config", default=None, help="YAML run configuration (default: shipped LQG benchmark)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. monte_carlo.seed=3 (repeatable)")
    parser.add_argument("--workers", type=int, default=None, help="worker threads; results do not depend on it")
    parser.add_argument("--out", default=None, help="output directory (default: output.dir)")
    parser.add_argument("--show-settings", action="store_true", help="print the resolved process settings first")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Parse arguments and run; argparse usage errors exit with code 2."""
    args = build_parser().parse_args(argv)
    if args.workers is not None and args.workers < 1:
        print('error=ConfigError message="--workers must be at least 1"', file=sys.stderr)
        return EXIT_USAGE
    if args.show_settings:
        print_settings()
    return run(args.subcommand, args.config, args.overrides, args.workers, args.out)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n👋 Exiting by Ctrl‑C")
        sys.exit(130)
