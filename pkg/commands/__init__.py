"""
Command-line sub-commands.

Each module exposes register(subparsers) and run(args) -> int.
"""

import logging

from config import RunConfig, config
from services import envelope as envelope_service
from services.aero import AeroSurface
from services.envelope import PwaEnvelope

logger = logging.getLogger(__name__)


def prepare(run: RunConfig) -> tuple[AeroSurface, PwaEnvelope]:
    """Load the configured surface and build (or reuse) its envelope."""
    surface = run.surface.load()
    env = envelope_service.build_envelope(run.turbine, surface, run.envelope, cache_dir=config.ENVELOPE_CACHE_DIR)
    return surface, env
