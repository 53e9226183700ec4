import argparse
import logging
from pathlib import Path

from app import __version__
from app.commands import aspects, data, model, ranking
from app.config import config
from app.exceptions import SagcnError
from app.services.workspace_service import Workspace

logger = logging.getLogger("sagcn")


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted after the subcommand, e.g. `train --seed 7`
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", type=Path, default=config.workspace_path, help="stage artifact directory")
    common.add_argument("--seed", type=int, help="overrides every seed of the stage")
    common.add_argument("--config", type=Path, help="TOML run configuration ([model] and [train])")
    common.add_argument("--log-level", default=config.log_level)
    common.add_argument("--quiet", action="store_true", help="hide progress bars")
    common.add_argument("--force", action="store_true", help="rerun a stage that is up to date")

    parser = argparse.ArgumentParser(
        prog="sagcn",
        description="Semantic aspect-aware graph recommendation from review corpora",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include command groups
    for group in (aspects, model, ranking, data):
        group.register(subparsers, [common])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    # Configure logging
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    logging.getLogger().setLevel(args.log_level.upper())

    try:
        args.handler(args, Workspace(args.workspace))
    except SagcnError as e:
        logger.error(f"{args.command}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unhandled exception: {str(e)}", exc_info=True)
        return 1
    return 0
