"""
Rigid-shaft turbine plant.

Torque-balance dynamics of the rotating assembly referred to the
high-speed shaft, integrated with classical RK4. This is the truth model
the controller acts on.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

from services import aero
from services.aero import AeroSurface
from services.errors import DegenerateK, NumericalBlowup, OutOfDomain

logger = logging.getLogger(__name__)

K_EPS = 1.0  # J
MAX_DT = 0.05


@dataclass(frozen=True)
class TurbineParams:
    """Physical constants and limits (SI units, generator side unless noted)."""

    J: float = 4665.8
    G_B: float = 97.0
    R: float = 63.0
    A_r: Optional[float] = None
    rho: float = 1.225
    eta_g: float = 0.944
    theta_min: float = 0.0
    theta_max: float = 0.52
    omega_g_rated: float = 122.9
    omega_g_min: Optional[float] = None
    omega_g_max: Optional[float] = None
    T_g_max: float = 43093.55
    P_g_rated: float = 5.0e6
    theta_rate_max: float = 0.14
    pitch_time_constant: float = 0.02

    def __post_init__(self):
        if self.A_r is None:
            object.__setattr__(self, "A_r", math.pi * self.R ** 2)
        if self.omega_g_min is None:
            object.__setattr__(self, "omega_g_min", 0.4 * self.omega_g_rated)
        if self.omega_g_max is None:
            object.__setattr__(self, "omega_g_max", 1.1 * self.omega_g_rated)

    @classmethod
    def nrel_5mw(cls) -> "TurbineParams":
        """Defaults approximating the NREL 5MW reference turbine."""
        return cls()

    def validate(self) -> list[str]:
        """Return a list of parameter problems (empty when consistent)."""
        errors = []
        for name in ("J", "G_B", "R", "A_r", "rho", "eta_g", "omega_g_min", "omega_g_max",
                     "omega_g_rated", "T_g_max", "P_g_rated", "theta_rate_max"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                errors.append(f"{name} must be a positive number, got {value!r}")
        if errors:
            return errors

        if self.eta_g > 1:
            errors.append(f"eta_g must lie in (0, 1], got {self.eta_g}")
        if self.pitch_time_constant < 0:
            errors.append("pitch_time_constant must be non-negative")
        if not self.theta_min < self.theta_max:
            errors.append(f"theta_min ({self.theta_min}) must be below theta_max ({self.theta_max})")
        if not self.omega_g_min < self.omega_g_rated <= self.omega_g_max:
            errors.append("speed limits must satisfy omega_g_min < omega_g_rated <= omega_g_max")
        if abs(self.A_r - math.pi * self.R ** 2) > 1e-6 * math.pi * self.R ** 2:
            errors.append(f"A_r ({self.A_r}) must equal pi*R^2 within 1e-6 relative")
        return errors

    @property
    def K_min(self) -> float:
        return kinetic_energy(self, self.omega_g_min)

    @property
    def K_max(self) -> float:
        return kinetic_energy(self, self.omega_g_max)

    @property
    def K_rated(self) -> float:
        return kinetic_energy(self, self.omega_g_rated)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class PlantState:
    """Generator speed, blade pitch and simulation time."""
    omega_g: float
    theta: float
    t: float = 0.0

    def kinetic_energy(self, params: TurbineParams) -> float:
        return kinetic_energy(params, self.omega_g)

    def validate(self, params: TurbineParams) -> list[str]:
        errors = []
        if not self.omega_g > 0:
            errors.append(f"omega_g must be positive, got {self.omega_g}")
        if not params.theta_min - 1e-12 <= self.theta <= params.theta_max + 1e-12:
            errors.append(f"theta {self.theta} outside [{params.theta_min}, {params.theta_max}]")
        return errors


@dataclass(frozen=True)
class ActuatorCommand:
    """Generator torque and collective pitch set-point."""
    T_g: float
    theta_cmd: float

    def validate(self, params: TurbineParams) -> list[str]:
        errors = []
        if not 0.0 <= self.T_g <= params.T_g_max * (1 + 1e-12):
            errors.append(f"T_g {self.T_g} outside [0, {params.T_g_max}]")
        if not params.theta_min - 1e-12 <= self.theta_cmd <= params.theta_max + 1e-12:
            errors.append(f"theta_cmd {self.theta_cmd} outside [{params.theta_min}, {params.theta_max}]")
        return errors


# ============================================================================
# ALGEBRAIC RELATIONS
# ============================================================================

def kinetic_energy(params: TurbineParams, omega_g: float) -> float:
    """K = J * omega_g^2 / 2."""
    return 0.5 * params.J * omega_g ** 2


def omega_from_energy(params: TurbineParams, K: float) -> float:
    """Generator speed for a given kinetic energy."""
    if K < K_EPS:
        raise DegenerateK(f"kinetic energy {K:.3g} J below {K_EPS} J")
    return math.sqrt(2.0 * K / params.J)


def tip_speed_ratio(params: TurbineParams, omega_g: float, v: float) -> float:
    """lambda = R * (omega_g / G_B) / v."""
    if v <= 0:
        raise OutOfDomain(f"wind speed must be positive, got {v}")
    return params.R * (omega_g / params.G_B) / v


def dynamic_pressure_area(params: TurbineParams, v: float) -> float:
    """0.5 * rho * A_r * v^2."""
    return 0.5 * params.rho * params.A_r * v ** 2


def rotor_power(params: TurbineParams, surface: AeroSurface, v: float, omega_g: float, theta: float) -> float:
    """Aerodynamic power 0.5 * rho * A_r * v^3 * Cp(lambda, theta) in W."""
    lam = tip_speed_ratio(params, omega_g, v)
    return dynamic_pressure_area(params, v) * v * aero.cp(surface, lam, theta)


def generator_power(params: TurbineParams, T_g: float, omega_g: float) -> float:
    """Electrical power eta_g * T_g * omega_g in W."""
    return params.eta_g * T_g * omega_g


def thrust(params: TurbineParams, surface: AeroSurface, v: float, omega_g: float, theta: float) -> float:
    """Rotor thrust 0.5 * rho * A_r * v^2 * Ct(lambda, theta) in N."""
    lam = tip_speed_ratio(params, omega_g, v)
    return dynamic_pressure_area(params, v) * aero.ct(surface, lam, theta)


def energy_residual(params: TurbineParams, omega_start: float, omega_end: float, energy_in: float) -> float:
    """Kinetic-energy change minus the integrated net power (J)."""
    return kinetic_energy(params, omega_end) - kinetic_energy(params, omega_start) - energy_in


# ============================================================================
# TIME INTEGRATION
# ============================================================================

def pitch_update(params: TurbineParams, theta: float, theta_cmd: float, dt: float) -> float:
    """
    Pitch after dt seconds: first-order lag toward the command, then rate
    and position limits.
    """
    tau = params.pitch_time_constant
    if tau > 0:
        target = theta_cmd + (theta - theta_cmd) * math.exp(-dt / tau)
    else:
        target = theta_cmd
    max_move = params.theta_rate_max * dt
    move = min(max(target - theta, -max_move), max_move)
    return min(max(theta + move, params.theta_min), params.theta_max)


def _omega_dot(params: TurbineParams, surface: AeroSurface, v: float, omega_g: float, theta: float, T_g: float) -> float:
    # T_r / G_B equals P_r / omega_g
    P_r = rotor_power(params, surface, v, omega_g, theta)
    return (P_r / omega_g - T_g) / params.J


def step(params: TurbineParams, surface: AeroSurface, state: PlantState, cmd: ActuatorCommand,
         v: float, dt: float) -> PlantState:
    """
    Advance the plant by one integration step.

    The pitch moves linearly from its start value to its rate-limited end
    value within the step; torque is held.

    Args:
        params: Turbine constants
        surface: Coefficient surface
        state: Current plant state
        cmd: Actuator command (held over the step)
        v: Wind speed in m/s
        dt: Step length in seconds, 0 < dt <= 0.05

    Returns:
        New PlantState

    Raises:
        NumericalBlowup: generator speed left (0, 2 * omega_g_max)
    """
    if not 0 < dt <= MAX_DT:
        raise ValueError(f"dt must lie in (0, {MAX_DT}], got {dt}")

    theta0 = state.theta
    theta1 = pitch_update(params, theta0, cmd.theta_cmd, dt)
    theta_mid = 0.5 * (theta0 + theta1)
    w = state.omega_g
    T_g = cmd.T_g

    try:
        k1 = _omega_dot(params, surface, v, w, theta0, T_g)
        k2 = _omega_dot(params, surface, v, w + 0.5 * dt * k1, theta_mid, T_g)
        k3 = _omega_dot(params, surface, v, w + 0.5 * dt * k2, theta_mid, T_g)
        k4 = _omega_dot(params, surface, v, w + dt * k3, theta1, T_g)
    except ZeroDivisionError as e:
        raise NumericalBlowup(f"generator speed collapsed at t={state.t:.2f}s", state.t, w) from e

    omega_new = w + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    t_new = state.t + dt

    if not (math.isfinite(omega_new) and 0.0 < omega_new < 2.0 * params.omega_g_max):
        raise NumericalBlowup(
            f"omega_g={omega_new:.4g} rad/s left (0, {2.0 * params.omega_g_max:.4g}) at t={t_new:.2f}s",
            t_new,
            omega_new,
        )

    return replace(state, omega_g=omega_new, theta=theta1, t=t_new)


def advance(params: TurbineParams, surface: AeroSurface, state: PlantState, cmd: ActuatorCommand,
            v: float, duration: float, dt: float) -> tuple[PlantState, float]:
    """
    Hold a command for `duration` seconds of plant time.

    Returns:
        (final state, integral of P_r - P_g/eta_g over the interval in J),
        the integral taken by the trapezoid rule on the integration steps
    """
    n_steps = max(int(round(duration / dt)), 1)
    h = duration / n_steps

    def net_power(s: PlantState) -> float:
        return rotor_power(params, surface, v, s.omega_g, s.theta) - cmd.T_g * s.omega_g

    energy_in = 0.0
    p_start = net_power(state)
    for _ in range(n_steps):
        state = step(params, surface, state, cmd, v, h)
        p_end = net_power(state)
        energy_in += 0.5 * h * (p_start + p_end)
        p_start = p_end
    return state, energy_in
