"""
Configuration module for the down-regulation simulator.

Process settings come from environment variables; experiment settings
come from a TOML run configuration with strict key checking.
"""

import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import pytz
from dotenv import load_dotenv

from services import aero
from services.aero import AeroSurface, SurfaceSource
from services.envelope import EnvelopeOptions
from services.errors import ConfigError
from services.harness import Scenario, WindSeries, reference_signal
from services.mpc import MpcConfig, Strategy
from services.qp import QpSettings
from services.turbine import TurbineParams

load_dotenv()


@dataclass(frozen=True)
class AppConfig:
    """Immutable process configuration."""

    # Logging
    LOG_LEVEL: str = field(default_factory=lambda: os.getenv("LOG_LEVEL", "INFO"))
    LOG_FILE: str = field(default_factory=lambda: os.getenv("LOG_FILE", "downreg.log"))

    # Output
    OUTPUT_DIR: str = field(default_factory=lambda: os.getenv("OUTPUT_DIR", "runs"))
    ENVELOPE_CACHE_DIR: str = field(default_factory=lambda: os.getenv("ENVELOPE_CACHE_DIR", ".cache/envelopes"))

    # Batch runs
    MAX_WORKERS: int = field(default_factory=lambda: int(os.getenv("MAX_WORKERS", "4")))

    # Timezone
    TIMEZONE: str = field(default_factory=lambda: os.getenv("TIMEZONE", "UTC"))

    def validate(self) -> list[str]:
        """Validate configuration and return list of errors."""
        errors = []

        if self.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            errors.append(f"LOG_LEVEL must be a logging level name, got {self.LOG_LEVEL!r}")
        if not self.OUTPUT_DIR:
            errors.append("OUTPUT_DIR is required")
        if self.MAX_WORKERS < 1:
            errors.append("MAX_WORKERS must be at least 1")

        if self.TIMEZONE not in pytz.all_timezones_set:
            errors.append(f"TIMEZONE {self.TIMEZONE!r} is not a known timezone")

        return errors


# Global config instance
config = AppConfig()


# ============================================================================
# RUN CONFIGURATION
# ============================================================================

# Key type tags: "float", "int", "bool", "str", "floats" (list of numbers),
# "wind" (number or table with times/values), "table".
SCHEMA: dict[str, dict[str, str]] = {
    "turbine": {
        "J": "float", "G_B": "float", "R": "float", "A_r": "float", "rho": "float",
        "eta_g": "float", "theta_min": "float", "theta_max": "float",
        "omega_g_min": "float", "omega_g_max": "float", "omega_g_rated": "float",
        "T_g_max": "float", "P_g_rated": "float", "theta_rate_max": "float",
        "pitch_time_constant": "float",
    },
    "surface": {"source": "str", "table": "str"},
    "envelope": {
        "wind_min": "float", "wind_max": "float", "wind_step": "float", "segments": "int",
        "samples": "int", "fit": "str", "cache": "bool",
    },
    "mpc": {
        "strategy": "str", "alphas": "floats", "horizon": "float", "sample_time": "float",
        "delta": "float", "stall_constraint": "bool", "lambda_opt": "float",
        "omega_ref_const": "float", "thrust_scale": "float", "stall_penalty": "float",
        "speed_penalty": "float", "regularization": "float", "min_thrust_form": "str",
        "reference_preview": "str", "state_term_scaling": "str",
    },
    "solver": {
        "max_iter": "int", "eps_abs": "float", "eps_rel": "float", "polish": "bool",
        "kkt_tol": "float", "feas_tol": "float", "dump_dir": "str",
    },
    "scenario": {
        "wind": "wind", "t_end": "float", "saturation_time": "float", "settling_time": "float",
        "tracking_tol": "float", "seed": "int", "dt": "float", "initial_omega_g": "float",
        "initial_theta": "float", "initial_condition": "str", "reference": "table",
    },
    "reference": {
        "kind": "str", "basis": "str", "before": "float", "after": "float", "at": "float",
        "start": "float", "end": "float", "times": "floats", "values": "floats",
    },
    "output": {"directory": "str"},
}


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_value(where: str, tag: str, value: Any) -> Optional[str]:
    if tag == "float":
        if not _is_number(value) or not math.isfinite(value):
            return f"{where} must be a finite number, got {value!r}"
    elif tag == "int":
        if not isinstance(value, int) or isinstance(value, bool):
            return f"{where} must be an integer, got {value!r}"
    elif tag == "bool":
        if not isinstance(value, bool):
            return f"{where} must be true or false, got {value!r}"
    elif tag == "str":
        if not isinstance(value, str):
            return f"{where} must be a string, got {value!r}"
    elif tag == "floats":
        if not isinstance(value, list) or not all(_is_number(v) and math.isfinite(v) for v in value):
            return f"{where} must be a list of finite numbers"
    elif tag == "wind":
        if _is_number(value):
            return None
        if not isinstance(value, dict) or set(value) != {"times", "values"}:
            return f"{where} must be a number or a table with times and values"
        for key in ("times", "values"):
            problem = _check_value(f"{where}.{key}", "floats", value[key])
            if problem:
                return problem
    elif tag == "table":
        if not isinstance(value, dict):
            return f"{where} must be a table"
    return None


def check_document(document: dict) -> list[str]:
    """Unknown sections, unknown keys and wrong value types."""
    errors = []
    for section, body in document.items():
        if section not in SCHEMA or section == "reference":
            errors.append(f"unknown section [{section}]")
            continue
        if not isinstance(body, dict):
            errors.append(f"[{section}] must be a table")
            continue
        for key, value in body.items():
            if key not in SCHEMA[section]:
                errors.append(f"unknown key {section}.{key}")
                continue
            problem = _check_value(f"{section}.{key}", SCHEMA[section][key], value)
            if problem:
                errors.append(problem)

    scenario = document.get("scenario")
    reference = scenario.get("reference") if isinstance(scenario, dict) else None
    if isinstance(reference, dict):
        for key, value in reference.items():
            if key not in SCHEMA["reference"]:
                errors.append(f"unknown key scenario.reference.{key}")
                continue
            problem = _check_value(f"scenario.reference.{key}", SCHEMA["reference"][key], value)
            if problem:
                errors.append(problem)
    return errors


@dataclass(frozen=True)
class SurfaceOptions:
    """Which coefficient surface to use."""
    source: str = SurfaceSource.PARAMETRIC_DEFAULT.value
    table: str = ""

    def validate(self) -> list[str]:
        errors = []
        if self.source not in {s.value for s in SurfaceSource}:
            errors.append(f"surface source must be one of {[s.value for s in SurfaceSource]}, got {self.source!r}")
        elif self.source == SurfaceSource.USER_TABLE.value and not self.table:
            errors.append("surface source 'user-table' needs surface.table")
        return errors

    def load(self) -> AeroSurface:
        if self.source == SurfaceSource.USER_TABLE.value:
            return aero.load_surface(self.table)
        return aero.default_surface()


@dataclass(frozen=True)
class OutputOptions:
    """Where results go."""
    directory: str = ""

    @property
    def resolved_directory(self) -> Path:
        return Path(self.directory or config.OUTPUT_DIR)


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs."""
    turbine: TurbineParams = field(default_factory=TurbineParams)
    surface: SurfaceOptions = field(default_factory=SurfaceOptions)
    envelope: EnvelopeOptions = field(default_factory=EnvelopeOptions)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    solver: QpSettings = field(default_factory=QpSettings)
    scenario: Scenario = field(default_factory=Scenario)
    output: OutputOptions = field(default_factory=OutputOptions)

    def validate(self) -> list[str]:
        return (
            self.turbine.validate()
            + self.surface.validate()
            + self.envelope.validate()
            + self.mpc.validate()
            + self.solver.validate()
            + self.scenario.validate(self.turbine)
        )

    def with_strategy(self, name: str | Strategy) -> "RunConfig":
        """Copy running the given strategy (the weight pattern follows from it)."""
        return replace(self, mpc=replace(self.mpc, strategy=Strategy.parse(name)))

    def to_dict(self) -> dict:
        return {
            "turbine": self.turbine.to_dict(),
            "surface": {"source": self.surface.source, "table": self.surface.table},
            "envelope": self.envelope.to_dict(),
            "mpc": self.mpc.to_dict(),
            "solver": {f.name: getattr(self.solver, f.name) for f in fields(self.solver)},
            "scenario": self.scenario.to_dict(),
            "output": {"directory": str(self.output.resolved_directory)},
        }


def _reference(section: dict) -> tuple[Any, str]:
    settings = dict(section)
    kind = settings.pop("kind", "ramp")
    basis = settings.pop("basis", "available")
    if not section:
        return Scenario().p_ref, basis
    return reference_signal(kind, settings), basis


def _scenario(section: dict) -> Scenario:
    settings = dict(section)
    reference = settings.pop("reference", {})
    wind = settings.pop("wind", 8.0)
    if _is_number(wind):
        wind_series = WindSeries.constant(wind)
    else:
        wind_series = WindSeries(tuple(wind["times"]), tuple(wind["values"]))
    p_ref, basis = _reference(reference)
    return Scenario(wind=wind_series, p_ref=p_ref, reference_basis=basis, **settings)


def parse_run_config(document: dict, base_dir: str | Path = ".") -> RunConfig:
    """
    Build a RunConfig from a parsed TOML document.

    Args:
        document: Parsed TOML
        base_dir: Directory relative table paths are resolved against

    Raises:
        ConfigError: unknown keys, wrong types or invalid values (all listed)
    """
    errors = check_document(document)
    if errors:
        raise ConfigError(errors)

    try:
        mpc = dict(document.get("mpc", {}))
        if "strategy" in mpc:
            mpc["strategy"] = Strategy.parse(mpc["strategy"])
        if "alphas" in mpc:
            mpc["alphas"] = tuple(mpc["alphas"])

        surface = dict(document.get("surface", {}))
        if surface.get("table"):
            surface["table"] = str((Path(base_dir) / surface["table"]).resolve())

        run = RunConfig(
            turbine=TurbineParams(**document.get("turbine", {})),
            surface=SurfaceOptions(**surface),
            envelope=EnvelopeOptions(**document.get("envelope", {})),
            mpc=MpcConfig(**mpc),
            solver=QpSettings(**document.get("solver", {})),
            scenario=_scenario(document.get("scenario", {})),
            output=OutputOptions(**document.get("output", {})),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))

    errors = run.validate()
    if errors:
        raise ConfigError(errors)
    return run


def load_run_config(path: str | Path) -> RunConfig:
    """
    Read and validate a TOML run configuration.

    Raises:
        ConfigError: unreadable file, TOML syntax error or invalid settings
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    return parse_run_config(document, base_dir=path.parent)
