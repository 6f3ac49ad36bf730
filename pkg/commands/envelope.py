"""
envelope: build the available-power envelope and save it.
"""

import argparse
import logging

from config import load_run_config
from services import envelope

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("envelope", help="Fit the available-power envelope and write it to a file")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", required=True, help="Target .npz file")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    surface = cfg.surface.load()
    env = envelope.build_envelope(cfg.turbine, surface, cfg.envelope)
    path = envelope.save_envelope(env, args.out)
    logger.info(f"Envelope {env.fingerprint[:16]} saved to {path}")
    print(path)
    return 0
