#!/usr/bin/env python3
"""
Kinetic-energy down-regulation simulator.

Runs a wind turbine under a convex model predictive controller that tracks
a power reference below the available power, with a choice of strategy for
where to park the surplus (rotor kinetic energy, thrust, tip-speed ratio or
rotor speed).

Sub-commands:
- simulate: one strategy through the configured scenario
- batch: several strategies, in parallel
- envelope: fit and save the available-power envelope
- plot-data: figure-ready CSV from a finished run
"""

import argparse
import logging
import sys

from commands import batch, envelope, plot_data, simulate
from config import config
from services.errors import ConfigError, DownregError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

logger = logging.getLogger(__name__)


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s | %(levelname)-8s | %(name)-20s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(config.LOG_FILE, encoding='utf-8')
        ]
    )

    # Reduce noise from numerical libraries
    logging.getLogger('numexpr').setLevel(logging.WARNING)
    logging.getLogger('matplotlib').setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Kinetic-energy down-regulation simulator")
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (simulate, batch, envelope, plot_data):
        module.register(subparsers)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or config.LOG_LEVEL)

    errors = config.validate()
    if errors:
        for error in errors:
            logger.error(f"Environment: {error}")
        return EXIT_CONFIG

    try:
        return args.handler(args)
    except ConfigError as e:
        for error in e.errors:
            logger.error(f"Configuration: {error}")
        return EXIT_CONFIG
    except DownregError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
