import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .commands import COMMANDS
from .config.moce_config import MONITORING
from .middleware.error_handler import ErrorHandler
from .utils.exceptions import ConfigurationError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moce",
        description="Mixture of clustered experts: sequence clustering, grouped adapter experts, training and reports",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=MONITORING["log_level"])
    parser.add_argument("--traceback", action="store_true", help="Include the traceback in error reports")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include subcommands
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def configure_logging(level_name: str) -> None:
    level = logging.getLevelName(level_name.upper())
    if not isinstance(level, int):
        raise ConfigurationError(f"Unknown log level '{level_name}'")
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    error_handler = ErrorHandler(show_traceback=args.traceback)
    try:
        configure_logging(args.log_level)
        return args.handler(args)
    except Exception as exc:
        return error_handler.handle_error(exc)


if __name__ == "__main__":
    sys.exit(main())
