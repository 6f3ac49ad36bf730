"""
plot-data: reshape a run directory into figure-ready CSV.
"""

import argparse

from services import harness


def register(subparsers) -> None:
    parser = subparsers.add_parser("plot-data", help="Write plot_<figure>.csv for a finished run")
    parser.add_argument("--run", required=True, help="Run output directory")
    parser.add_argument("--figure", required=True, choices=harness.PLOT_FIGURES)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    print(harness.plot_data(args.run, args.figure))
    return 0
