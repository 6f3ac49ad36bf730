"""
Shared fixtures. Building the surface and the envelope is the expensive
part, so both are session-scoped.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from services import aero, envelope  # noqa: E402
from services.turbine import TurbineParams  # noqa: E402


@pytest.fixture(scope="session")
def params() -> TurbineParams:
    return TurbineParams.nrel_5mw()


@pytest.fixture(scope="session")
def surface():
    return aero.default_surface()


@pytest.fixture(scope="session")
def env(params, surface):
    return envelope.build_envelope(params, surface)


@pytest.fixture(scope="session")
def lambda_opt(surface) -> float:
    return aero.optimal_tip_speed_ratio(surface)
