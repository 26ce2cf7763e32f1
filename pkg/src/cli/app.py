"""
Command-line entry point.

Subcommands:
    cell      solve the six cell problems and write the permeability file
    darcy     solve the homogenized Darcy problem from a permeability file
    pipeline  cell followed by darcy
    validate  unfolding identities and, with --full, the resolved eps-sweep

Exit codes: 0 success, 1 numerical failure, 2 configuration or I/O failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_config

from src import __version__
from src.cli.pipeline import cmd_cell, cmd_darcy, cmd_pipeline, cmd_validate
from src.cli.run_config import OUTPUT_FORMATS, load_run_config
from src.utils.errors import HomogenizationError, format_error

logger = logging.getLogger(__name__)


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="micropolar-homog",
        description=get_config().app.title,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    common.add_argument("--out", type=Path, default=None, help="Output directory (overrides [output] directory)")
    common.add_argument("--format", choices=OUTPUT_FORMATS, default=None, help="Macro output format")
    common.add_argument("--plot", action="store_true", default=None, help="Write the pressure/velocity plot")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("cell", parents=[common], help="Solve the cell problems")
    for name, text in (("darcy", "Solve the Darcy problem"), ("pipeline", "Run cell and darcy")):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("--perm", type=Path, default=None, help="Permeability file to use")
    validate = commands.add_parser("validate", parents=[common], help="Run the validation suite")
    validate.add_argument("--full", action="store_true", default=None, help="Include the resolved eps-sweep")
    validate.add_argument("--record-baseline", action="store_true", default=None,
                          help="With --full, write the measured scaling ratios to the versioned baseline file")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "output.directory": str(args.out.resolve()) if args.out is not None else None,
        "output.formats": args.format,
        "output.plot": args.plot,
        "validation.full": getattr(args, "full", None),
        "validation.record_baseline": getattr(args, "record_baseline", None),
    }


def run(args: argparse.Namespace):
    config_path = args.config
    if config_path is None and get_config().app.default_config.is_file():
        config_path = get_config().app.default_config
    run_config = load_run_config(config_path, _overrides(args))
    perm = getattr(args, "perm", None)
    if args.command == "cell":
        return cmd_cell(run_config)
    if args.command == "darcy":
        return cmd_darcy(run_config, perm)
    if args.command == "pipeline":
        return cmd_pipeline(run_config, perm)
    return cmd_validate(run_config)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command and return its exit code."""
    args = create_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(get_config().app.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        result = run(args)
    except HomogenizationError as e:
        print(format_error(e), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("unexpected failure")
        print(format_error(e), file=sys.stderr)
        return 1

    if not result.success:
        print(result.message, file=sys.stderr)
        return result.exit_code or 1
    print(result.message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
