"""
Closed-loop scenario runner.

The plant is integrated at the scenario's dt while the controller acts
every sample time with a zero-order hold. Runs are deterministic: the same
scenario and configuration give bit-identical CSV output.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from typing_extensions import Literal

from services import aero, envelope, turbine
from services.aero import AeroSurface
from services.envelope import PwaEnvelope
from services.errors import ConfigError, DownregError, NumericalBlowup
from services.mpc import Controller, Measurement, MpcConfig, Strategy, pitch_command, steady_state_energy
from services.qp import QpSettings
from services.turbine import ActuatorCommand, PlantState, TurbineParams
from utils import csv_io
from utils.json_safe import safe_json_dumps, safe_json_loads
from utils.time import iso_stamp

logger = logging.getLogger(__name__)

ReferenceBasis = Literal["absolute", "available"]
InitialCondition = Literal["steady-state", "rated"]

SETTLING_TIME = 60.0
TRACKING_TOL = 0.02
SPEED_MARGIN = 0.005
P_REF_FLOOR = 1.0  # W


# ============================================================================
# SIGNALS
# ============================================================================

@dataclass(frozen=True)
class ReferenceSchedule:
    """
    Piecewise-linear signal through (times, values). A repeated knot time
    makes a jump: the later value holds from that instant on.
    """
    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def validate(self) -> list[str]:
        errors = []
        if len(self.times) == 0 or len(self.times) != len(self.values):
            errors.append("reference needs matching, non-empty times and values")
            return errors
        steps = np.diff(self.times)
        if np.any(steps < 0):
            errors.append("reference knot times must be non-decreasing")
        if np.any((steps[1:] == 0) & (steps[:-1] == 0)):
            errors.append("reference knot times may repeat at most twice")
        if any(not math.isfinite(v) or v < 0 for v in self.values):
            errors.append("reference values must be finite and non-negative")
        return errors

    def __call__(self, t):
        times = np.asarray(self.times)
        values = np.asarray(self.values)
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        i = np.searchsorted(times, t_arr, side="right") - 1
        out = np.empty_like(t_arr)

        before = i < 0
        after = i >= times.size - 1
        inside = ~before & ~after
        out[before] = values[0]
        out[after] = values[-1]
        j = i[inside]
        weight = (t_arr[inside] - times[j]) / (times[j + 1] - times[j])
        out[inside] = values[j] + weight * (values[j + 1] - values[j])
        return float(out[0]) if np.ndim(t) == 0 else out

    def sample(self, Ts: float, t_end: float) -> np.ndarray:
        """Values at 0, Ts, 2Ts, ... up to t_end."""
        n = int(round(t_end / Ts)) + 1
        return self(np.arange(n) * Ts)

    def scaled(self, factor: float) -> "ReferenceSchedule":
        return ReferenceSchedule(self.times, tuple(v * factor for v in self.values))

    @property
    def peak(self) -> float:
        return max(self.values)

    @classmethod
    def step(cls, before: float, after: float, at: float) -> "ReferenceSchedule":
        return cls((at, at), (before, after))

    @classmethod
    def ramp(cls, before: float, after: float, start: float, end: float) -> "ReferenceSchedule":
        return cls((start, end), (before, after))

    @classmethod
    def profile(cls, times: Sequence[float], values: Sequence[float]) -> "ReferenceSchedule":
        return cls(tuple(times), tuple(values))


def reference_signal(kind: str, settings: dict) -> ReferenceSchedule:
    """
    Build a reference schedule.

    Args:
        kind: "step" (before, after, at), "ramp" (before, after, start, end)
            or "profile" (times, values)
        settings: The kind's parameters

    Raises:
        ConfigError: unknown kind, missing parameters or an invalid schedule
    """
    required = {
        "step": ("before", "after", "at"),
        "ramp": ("before", "after", "start", "end"),
        "profile": ("times", "values"),
    }
    if kind not in required:
        raise ConfigError(f"reference kind must be one of {sorted(required)}, got {kind!r}")
    missing = [name for name in required[kind] if name not in settings]
    if missing:
        raise ConfigError(f"{kind} reference is missing {', '.join(missing)}")

    if kind == "step":
        schedule = ReferenceSchedule.step(settings["before"], settings["after"], settings["at"])
    elif kind == "ramp":
        if not settings["end"] > settings["start"]:
            raise ConfigError("ramp reference needs end > start")
        schedule = ReferenceSchedule.ramp(settings["before"], settings["after"], settings["start"], settings["end"])
    else:
        schedule = ReferenceSchedule.profile(settings["times"], settings["values"])

    errors = schedule.validate()
    if errors:
        raise ConfigError(errors)
    return schedule


@dataclass(frozen=True)
class WindSeries:
    """Wind speed, piecewise linear in time, held beyond the ends."""
    times: tuple[float, ...] = (0.0,)
    values: tuple[float, ...] = (8.0,)

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def constant(cls, v: float) -> "WindSeries":
        return cls((0.0,), (float(v),))

    def validate(self) -> list[str]:
        errors = []
        if len(self.times) == 0 or len(self.times) != len(self.values):
            errors.append("wind needs matching, non-empty times and values")
        elif np.any(np.diff(self.times) <= 0):
            errors.append("wind times must be strictly increasing")
        if any(not v > 0 for v in self.values):
            errors.append("wind speeds must be positive")
        return errors

    def __call__(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))


@dataclass(frozen=True)
class Scenario:
    """One closed-loop experiment."""
    wind: WindSeries = field(default_factory=WindSeries)
    p_ref: ReferenceSchedule = field(default_factory=lambda: ReferenceSchedule.ramp(0.75, 1.25, 300.0, 310.0))
    reference_basis: ReferenceBasis = "available"
    t_end: float = 600.0
    saturation_time: float = 300.0
    settling_time: float = SETTLING_TIME
    tracking_tol: float = TRACKING_TOL
    seed: int = 0
    dt: float = 0.01
    initial_omega_g: Optional[float] = None
    initial_theta: Optional[float] = None
    initial_condition: InitialCondition = "steady-state"

    def validate(self, params: Optional[TurbineParams] = None, env: Optional[PwaEnvelope] = None) -> list[str]:
        """
        Problems with the scenario, empty when it is runnable.

        The rated-power check needs params; for the available basis it also
        needs env to turn fractions into watts.
        """
        errors = self.wind.validate() + self.p_ref.validate()
        if not self.t_end > self.saturation_time > 0:
            errors.append("scenario needs t_end > saturation_time > 0")
        if not 0 <= self.settling_time < self.saturation_time:
            errors.append("scenario settling_time must lie in [0, saturation_time)")
        if not 0 < self.tracking_tol < 1:
            errors.append("scenario tracking_tol must lie in (0, 1)")
        if not 0 < self.dt <= turbine.MAX_DT:
            errors.append(f"scenario dt must lie in (0, {turbine.MAX_DT}]")
        if self.reference_basis not in ("absolute", "available"):
            errors.append(f"reference basis must be 'absolute' or 'available', got {self.reference_basis!r}")
        if self.initial_condition not in ("steady-state", "rated"):
            errors.append(f"initial_condition must be 'steady-state' or 'rated', got {self.initial_condition!r}")
        if params is not None:
            if self.reference_basis == "absolute" and self.p_ref.peak > params.P_g_rated:
                errors.append("reference exceeds the rated generator power")
            elif self.reference_basis == "available" and env is not None and not errors:
                if self.reference_watts(env).peak > params.P_g_rated:
                    errors.append("reference exceeds the rated generator power")
            if self.initial_omega_g is not None and not params.omega_g_min <= self.initial_omega_g <= params.omega_g_max:
                errors.append("initial_omega_g outside the speed limits")
        return errors

    def reference_watts(self, env: PwaEnvelope) -> ReferenceSchedule:
        """The reference in W; 'available' fractions are scaled by P_av,max at the initial wind."""
        if self.reference_basis == "absolute":
            return self.p_ref
        return self.p_ref.scaled(envelope.max_available_power(env, self.wind(0.0)))

    def to_dict(self) -> dict:
        return {
            "wind": {"times": list(self.wind.times), "values": list(self.wind.values)},
            "p_ref": {"times": list(self.p_ref.times), "values": list(self.p_ref.values)},
            "reference_basis": self.reference_basis,
            "t_end": self.t_end,
            "saturation_time": self.saturation_time,
            "settling_time": self.settling_time,
            "tracking_tol": self.tracking_tol,
            "seed": self.seed,
            "dt": self.dt,
            "initial_omega_g": self.initial_omega_g,
            "initial_theta": self.initial_theta,
            "initial_condition": self.initial_condition,
        }


def default_scenario(v: float = 8.0, t_end: float = 600.0, saturation_time: float = 300.0,
                     before: float = 0.75, after: float = 1.25, ramp: float = 10.0) -> Scenario:
    """Down-regulated operation, then a ramp above the available power at saturation_time."""
    return Scenario(
        wind=WindSeries.constant(v),
        p_ref=ReferenceSchedule.ramp(before, after, saturation_time, saturation_time + ramp),
        reference_basis="available",
        t_end=t_end,
        saturation_time=saturation_time,
    )


# ============================================================================
# METRICS
# ============================================================================

@dataclass(frozen=True)
class SimMetrics:
    """Per-run summary figures."""
    strategy: str
    mean_K_before: float
    mean_thrust_before: float
    tracking_time_after_saturation: float
    tracking_rmse_before: float
    constraint_violation_count: int
    degraded_steps: int = 0

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def tracking_time_after_saturation(series: pd.DataFrame, saturation_time: float,
                                   tol: float = TRACKING_TOL) -> float:
    """
    How long after saturation_time the reference is still tracked.

    The largest tau such that |P_g - P_ref| / P_ref <= tol at every sample in
    [saturation_time, saturation_time + tau].
    """
    after = series[series["t"] >= saturation_time - 1e-9]
    if after.empty:
        return 0.0
    t = after["t"].to_numpy()
    error = np.abs(after["P_g"].to_numpy() - after["P_ref"].to_numpy())
    passing = error <= tol * np.maximum(after["P_ref"].to_numpy(), P_REF_FLOOR)
    if passing.all():
        return float(t[-1] - saturation_time)
    first_fail = int(np.argmin(passing))
    if first_fail == 0:
        return 0.0
    return float(t[first_fail - 1] - saturation_time)


def summarize(series: pd.DataFrame, saturation_time: float, settling_time: float = SETTLING_TIME,
              tol: float = TRACKING_TOL, params: Optional[TurbineParams] = None,
              strategy: str = "", degraded_steps: int = 0) -> SimMetrics:
    """Means over [settling_time, saturation_time), tracking time and speed-limit excursions."""
    t = series["t"].to_numpy()
    window = (t >= settling_time) & (t < saturation_time)
    if not window.any():
        window = t < saturation_time
    before = series[window]

    if before.empty:
        mean_K = mean_thrust = rmse = math.nan
    else:
        mean_K = float(before["K"].mean())
        mean_thrust = float(before["F_T"].mean())
        rmse = float(np.sqrt(np.mean((before["P_g"] - before["P_ref"]) ** 2)))

    violations = 0
    if params is not None:
        omega = series["omega_g"].to_numpy()
        low = params.omega_g_min * (1 - SPEED_MARGIN)
        high = params.omega_g_max * (1 + SPEED_MARGIN)
        violations = int(np.count_nonzero((omega < low) | (omega > high)))

    return SimMetrics(
        strategy=strategy,
        mean_K_before=mean_K,
        mean_thrust_before=mean_thrust,
        tracking_time_after_saturation=tracking_time_after_saturation(series, saturation_time, tol),
        tracking_rmse_before=rmse,
        constraint_violation_count=violations,
        degraded_steps=degraded_steps,
    )


# ============================================================================
# CLOSED LOOP
# ============================================================================

@dataclass
class RunResult:
    """Time series, solver diagnostics and metrics of one run."""
    strategy: str
    series: pd.DataFrame
    diagnostics: pd.DataFrame
    metrics: SimMetrics
    energy_residual: float = 0.0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "metrics": self.metrics.to_dict(),
            "energy_residual": self.energy_residual,
            "wall_time": self.wall_time,
            "steps": len(self.series),
        }


def initial_state(params: TurbineParams, surface: AeroSurface, env: PwaEnvelope, cfg: MpcConfig,
                  scenario: Scenario, P_ref0: float) -> PlantState:
    """
    Plant state at t = 0.

    An explicit initial_omega_g wins; otherwise 'steady-state' starts where
    the strategy would settle for the initial reference and 'rated' starts
    at rated speed. The pitch delivers the initial reference unless given.
    """
    v0 = scenario.wind(0.0)
    if scenario.initial_omega_g is not None:
        K0 = turbine.kinetic_energy(params, scenario.initial_omega_g)
    elif scenario.initial_condition == "steady-state":
        K0 = steady_state_energy(params, surface, env, cfg, v0, P_ref0)
    else:
        K0 = params.K_rated
    omega0 = turbine.omega_from_energy(params, K0)

    if scenario.initial_theta is not None:
        theta0 = scenario.initial_theta
    else:
        theta0 = pitch_command(surface, params, P_ref0 / params.eta_g, K0, v0)
    return PlantState(omega_g=omega0, theta=theta0, t=0.0)


def _record(params: TurbineParams, surface: AeroSurface, env: PwaEnvelope, strategy: str,
            state: PlantState, cmd: ActuatorCommand, v: float, P_ref: float) -> dict:
    K = state.kinetic_energy(params)
    lam = turbine.tip_speed_ratio(params, state.omega_g, v)
    try:
        margin = aero.stall_margin(surface, params, v, lam, state.theta, margin_cells=0)
        dtr = margin.dtr_dtheta
    except DownregError:
        dtr = math.nan
    try:
        p_av = envelope.available_power(params, surface, v, K)
    except DownregError:
        p_av = math.nan
    lo_K, hi_K = env.K_range
    return {
        "strategy": strategy,
        "t": state.t,
        "v": v,
        "omega_g": state.omega_g,
        "K": K,
        "theta": state.theta,
        "theta_cmd": cmd.theta_cmd,
        "T_g": cmd.T_g,
        "P_r": turbine.rotor_power(params, surface, v, state.omega_g, state.theta),
        "P_g": turbine.generator_power(params, cmd.T_g, state.omega_g),
        "P_ref": P_ref,
        "P_av_hat": envelope.eval_envelope(env, v, min(max(K, lo_K), hi_K)),
        "P_av": p_av,
        "F_T": turbine.thrust(params, surface, v, state.omega_g, state.theta),
        "dtr_dtheta": dtr,
        "dcq_dtheta": dtr / (0.5 * params.rho * params.A_r * params.R * v ** 2),
    }


def run_scenario(scenario: Scenario, params: TurbineParams, surface: AeroSurface, cfg: MpcConfig,
                 env: Optional[PwaEnvelope] = None, settings: Optional[QpSettings] = None) -> RunResult:
    """
    Run one closed loop.

    Args:
        scenario: Wind, reference and timing
        params: Turbine constants
        surface: Coefficient surface
        cfg: Controller configuration
        env: Prebuilt envelope (built without cache when omitted)
        settings: QP solver settings

    Returns:
        RunResult with one series row per controller step

    Raises:
        ConfigError: invalid scenario or controller configuration
        NumericalBlowup: the plant left its admissible speed band
    """
    errors = scenario.validate(params) + cfg.validate()
    if errors:
        raise ConfigError(errors)
    if env is None:
        env = envelope.build_envelope(params, surface)
    errors = scenario.validate(params, env)
    if errors:
        raise ConfigError(errors)

    started = time.perf_counter()
    strategy = cfg.strategy.value
    controller = Controller(params, surface, env, cfg, settings)
    cfg = controller.cfg
    reference = scenario.reference_watts(env)

    Ts = cfg.sample_time
    n_steps = int(round(scenario.t_end / Ts))
    offsets = np.arange(cfg.N) * Ts

    state = initial_state(params, surface, env, cfg, scenario, reference(0.0))
    K_start = state.kinetic_energy(params)
    energy_in = 0.0
    records = []
    diag_times = []

    logger.info(f"Running {strategy}: {n_steps} steps of {Ts}s, plant dt={scenario.dt}s")
    for _ in range(n_steps):
        t = state.t
        v = scenario.wind(t)
        P_ref_now = reference(t)
        if cfg.reference_preview == "scheduled":
            horizon = reference(t + offsets)
        else:
            horizon = np.full(cfg.N, P_ref_now)

        measurement = Measurement(K=state.kinetic_energy(params), theta=state.theta, v=v)
        cmd = controller.step(measurement, horizon)
        records.append(_record(params, surface, env, strategy, state, cmd, v, P_ref_now))
        diag_times.append(t)

        try:
            state, e_in = turbine.advance(params, surface, state, cmd, v, Ts, scenario.dt)
        except NumericalBlowup as e:
            logger.exception(f"{strategy} run aborted at t={e.t:.2f}s (omega_g={e.omega_g:.4g})")
            raise
        energy_in += e_in

    residual = abs(state.kinetic_energy(params) - K_start - energy_in) / K_start
    series = pd.DataFrame.from_records(records, columns=csv_io.RUN_COLUMNS)
    diagnostics = pd.DataFrame.from_records([d.to_dict() for d in controller.diagnostics])
    diagnostics.insert(0, "t", diag_times)
    diagnostics.insert(0, "strategy", strategy)

    metrics = summarize(
        series,
        scenario.saturation_time,
        scenario.settling_time,
        scenario.tracking_tol,
        params=params,
        strategy=strategy,
        degraded_steps=controller.degraded_steps,
    )
    wall = time.perf_counter() - started
    logger.info(
        f"Finished {strategy} in {wall:.1f}s: tracking after saturation "
        f"{metrics.tracking_time_after_saturation:.1f}s, mean thrust {metrics.mean_thrust_before / 1e3:.1f} kN, "
        f"degraded steps {controller.degraded_steps}"
    )
    return RunResult(
        strategy=strategy,
        series=series,
        diagnostics=diagnostics[csv_io.DIAGNOSTIC_COLUMNS],
        metrics=metrics,
        energy_residual=residual,
        wall_time=wall,
    )


def _run_strategy(job: tuple) -> RunResult:
    scenario, params, surface, cfg, env, settings = job
    return run_scenario(scenario, params, surface, cfg, env, settings)


def run_batch(scenario: Scenario, params: TurbineParams, surface: AeroSurface, cfg: MpcConfig,
              strategies: Sequence[Strategy], env: Optional[PwaEnvelope] = None,
              settings: Optional[QpSettings] = None, max_workers: int = 1) -> list[RunResult]:
    """
    One run per strategy, in parallel processes when max_workers > 1.

    Results come back in the order of strategies.
    """
    if env is None:
        env = envelope.build_envelope(params, surface)
    cfg = cfg.resolved(surface)
    jobs = [
        (scenario, params, surface, replace(cfg, strategy=Strategy(s)), env, settings)
        for s in strategies
    ]
    logger.info(f"Batch of {len(jobs)} runs with up to {max_workers} workers")

    if max_workers <= 1 or len(jobs) <= 1:
        return [_run_strategy(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(max_workers, len(jobs))) as pool:
        return list(pool.map(_run_strategy, jobs))


# ============================================================================
# OUTPUT
# ============================================================================

def write_run_outputs(results: Sequence[RunResult], out_dir: str | Path,
                      manifest: Optional[dict] = None) -> Path:
    """
    Write run.csv, metrics.csv, diagnostics.csv and manifest.json.

    Returns:
        The output directory
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    run = pd.concat([r.series for r in results], ignore_index=True)
    metrics = pd.DataFrame.from_records([r.metrics.to_dict() for r in results], columns=csv_io.METRIC_COLUMNS)
    diagnostics = pd.concat([r.diagnostics for r in results], ignore_index=True)

    csv_io.write_frame(run, out_dir / "run.csv", csv_io.RUN_COLUMNS)
    csv_io.write_frame(metrics, out_dir / "metrics.csv", csv_io.METRIC_COLUMNS)
    csv_io.write_frame(diagnostics, out_dir / "diagnostics.csv", csv_io.DIAGNOSTIC_COLUMNS)

    document = {
        "created": iso_stamp(),
        "csv_version": csv_io.RUN_CSV_VERSION,
        "runs": [r.to_dict() for r in results],
        "config": manifest or {},
    }
    (out_dir / "manifest.json").write_text(safe_json_dumps(document, compact=False), encoding="utf-8")
    logger.info(f"Wrote outputs for {len(results)} runs to {out_dir}")
    return out_dir


PLOT_FIGURES = ("power", "stallmap", "loads")


def run_models(run_dir: str | Path) -> tuple[AeroSurface, TurbineParams]:
    """
    Surface and turbine a finished run was made with, read from its manifest.

    Runs without a turbine or surface section fall back to the defaults.

    Raises:
        ConfigError: the manifest holds settings that cannot be rebuilt
    """
    path = Path(run_dir) / "manifest.json"
    document = safe_json_loads(path.read_text(encoding="utf-8"), default={}) if path.exists() else {}
    settings = document.get("config") or {}

    try:
        params = TurbineParams(**settings["turbine"]) if "turbine" in settings else TurbineParams()
    except TypeError as e:
        raise ConfigError(f"manifest turbine section is unusable: {e}")
    source = settings.get("surface", {})
    if source.get("source") == aero.SurfaceSource.USER_TABLE.value:
        surface = aero.load_surface(source["table"])
    else:
        surface = aero.default_surface()

    if "turbine" not in settings or "surface" not in settings:
        logger.warning(f"No turbine or surface settings in {path}, using defaults for the missing parts")
    return surface, params


def plot_data(run_dir: str | Path, figure: str, surface: Optional[AeroSurface] = None,
              params: Optional[TurbineParams] = None) -> Path:
    """
    Long-format data for one figure, written next to run.csv as plot_<figure>.csv.

    The stall map uses the run's own surface and turbine (from manifest.json)
    unless surface or params are given.

    Raises:
        ConfigError: unknown figure or missing run.csv
    """
    if figure not in PLOT_FIGURES:
        raise ConfigError(f"figure must be one of {list(PLOT_FIGURES)}, got {figure!r}")
    run_dir = Path(run_dir)
    run_path = run_dir / "run.csv"
    if not run_path.exists():
        raise ConfigError(f"no run.csv in {run_dir}")
    run = csv_io.read_frame(run_path)

    if figure == "power":
        frame = csv_io.power_long_format(run)
    elif figure == "loads":
        frame = csv_io.loads_frame(run)
    else:
        if surface is None or params is None:
            run_surface, run_params = run_models(run_dir)
            surface = surface or run_surface
            params = params or run_params
        path = run[["strategy", "t", "theta"]].copy()
        path["lambda"] = params.R * run["omega_g"] / params.G_B / run["v"]
        frame = csv_io.stallmap_frame(aero.stall_region_map(surface), path)

    target = run_dir / f"plot_{figure}.csv"
    csv_io.write_frame(frame, target)
    logger.info(f"Wrote {figure} plot data ({len(frame)} rows) to {target}")
    return target
