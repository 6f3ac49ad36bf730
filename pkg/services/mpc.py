"""
Receding-horizon down-regulation controller.

Every control step a convex QP is built over the horizon in energy
coordinates (decision variables rotor power, generator power and kinetic
energy), solved, and its first input is turned into pitch and torque
set-points. Powers are normalized by the rated generator power and energies
by the rated kinetic energy inside the problem.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sparse
from typing_extensions import Literal

from services import aero, envelope, qp
from services.aero import AeroSurface
from services.envelope import PwaCuts, PwaEnvelope
from services.errors import (ConfigError, DegenerateK, DimensionMismatch, DownregError,
                             OutOfDomain, Unachievable)
from services.linearize import LinearModels, linearize_at
from services.qp import QpProblem, QpSettings, QpStatus
from services.turbine import K_EPS, ActuatorCommand, PlantState, TurbineParams, omega_from_energy

logger = logging.getLogger(__name__)

MinThrustForm = Literal["epigraph", "quadratic"]
ReferencePreview = Literal["hold", "scheduled"]
TermScaling = Literal["mean", "sum"]

DEFAULT_ALPHAS = (10.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.01)


class Strategy(str, Enum):
    MAX_KINETIC_ENERGY = "MaxKineticEnergy"
    MIN_THRUST = "MinThrust"
    CONSTANT_TIP_SPEED_RATIO = "ConstantTipSpeedRatio"
    CONSTANT_ROTOR_SPEED = "ConstantRotorSpeed"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        """Accept the value, the member name or a short alias (maxk, minthrust, ctsr, crs)."""
        aliases = {
            "maxk": cls.MAX_KINETIC_ENERGY,
            "minthrust": cls.MIN_THRUST,
            "ctsr": cls.CONSTANT_TIP_SPEED_RATIO,
            "crs": cls.CONSTANT_ROTOR_SPEED,
        }
        key = str(name).strip()
        for member in cls:
            if key == member.value or key.upper() == member.name:
                return member
        if key.lower() in aliases:
            return aliases[key.lower()]
        raise ConfigError(f"unknown strategy {name!r}; expected one of {[m.value for m in cls]}")


# Which of alpha5 (maximize K), alpha6 (track K_ref), alpha7 (thrust) each strategy keeps
_STRATEGY_TERM = {
    Strategy.MAX_KINETIC_ENERGY: 4,
    Strategy.MIN_THRUST: 6,
    Strategy.CONSTANT_TIP_SPEED_RATIO: 5,
    Strategy.CONSTANT_ROTOR_SPEED: 5,
}


def strategy_weights(strategy: Strategy, alphas: Sequence[float]) -> tuple[float, ...]:
    """alpha1..alpha4 unchanged; of alpha5..alpha7 only the strategy's own term survives."""
    alphas = tuple(float(a) for a in alphas)
    if len(alphas) != 7:
        raise DimensionMismatch(f"expected 7 weights, got {len(alphas)}")
    keep = _STRATEGY_TERM[Strategy(strategy)]
    return tuple(a if i < 4 or i == keep else 0.0 for i, a in enumerate(alphas))


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, weights and strategy options of the controller."""
    strategy: Strategy = Strategy.MAX_KINETIC_ENERGY
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    horizon: float = 20.0
    sample_time: float = 0.2
    delta: float = 0.0
    stall_constraint: bool = True
    lambda_opt: Optional[float] = None
    omega_ref_const: float = 1.08  # rotor side, rad/s
    thrust_scale: float = 7.0e5
    stall_penalty: float = 1.0e6
    speed_penalty: float = 1.0e6
    regularization: float = 1e-9
    min_thrust_form: MinThrustForm = "epigraph"
    reference_preview: ReferencePreview = "scheduled"
    state_term_scaling: TermScaling = "mean"

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    @property
    def N(self) -> int:
        return int(round(self.horizon / self.sample_time))

    @property
    def weights(self) -> tuple[float, ...]:
        return strategy_weights(self.strategy, self.alphas)

    def validate(self) -> list[str]:
        errors = []
        if len(self.alphas) != 7:
            errors.append(f"mpc alphas needs 7 entries, got {len(self.alphas)}")
        elif any(not math.isfinite(a) or a < 0 for a in self.alphas):
            errors.append("mpc alphas must be finite and non-negative")
        elif self.alphas[0] <= 0:
            errors.append("mpc alpha1 (tracking weight) must be positive")
        if not self.sample_time > 0 or not self.horizon > 0:
            errors.append("mpc horizon and sample_time must be positive")
        elif abs(self.N * self.sample_time - self.horizon) > 1e-9 * self.horizon or self.N < 2:
            errors.append("mpc horizon / sample_time must be an integer of at least 2")
        if self.delta < 0:
            errors.append("mpc delta must be non-negative")
        if self.lambda_opt is not None and not self.lambda_opt > 0:
            errors.append("mpc lambda_opt must be positive")
        if not self.omega_ref_const > 0:
            errors.append("mpc omega_ref_const must be positive")
        for name in ("thrust_scale", "stall_penalty", "speed_penalty"):
            if not getattr(self, name) > 0:
                errors.append(f"mpc {name} must be positive")
        if self.regularization < 0:
            errors.append("mpc regularization must be non-negative")
        if self.min_thrust_form not in ("epigraph", "quadratic"):
            errors.append(f"mpc min_thrust_form must be 'epigraph' or 'quadratic', got {self.min_thrust_form!r}")
        if self.reference_preview not in ("hold", "scheduled"):
            errors.append(f"mpc reference_preview must be 'hold' or 'scheduled', got {self.reference_preview!r}")
        if self.state_term_scaling not in ("mean", "sum"):
            errors.append(f"mpc state_term_scaling must be 'mean' or 'sum', got {self.state_term_scaling!r}")
        return errors

    def resolved(self, surface: AeroSurface) -> "MpcConfig":
        """Copy with lambda_opt filled in from the surface when unset."""
        if self.lambda_opt is not None:
            return self
        return replace(self, lambda_opt=aero.optimal_tip_speed_ratio(surface))

    def to_dict(self) -> dict:
        data = {name: getattr(self, name) for name in self.__dataclass_fields__}
        data["strategy"] = self.strategy.value
        data["alphas"] = list(self.alphas)
        return data


def kinetic_reference(params: TurbineParams, cfg: MpcConfig, v: float) -> float:
    """
    Kinetic-energy set-point of the tracking strategies (J).

    ConstantRotorSpeed uses the fixed rotor speed; every other strategy
    gets the constant tip-speed-ratio value for the wind speed v.
    """
    if cfg.strategy == Strategy.CONSTANT_ROTOR_SPEED:
        omega_g = cfg.omega_ref_const * params.G_B
    else:
        if v <= 0:
            raise OutOfDomain(f"wind speed must be positive, got {v}")
        if cfg.lambda_opt is None:
            raise ConfigError("lambda_opt is unset; call MpcConfig.resolved(surface) first")
        omega_g = cfg.lambda_opt * v / params.R * params.G_B
    return 0.5 * params.J * omega_g ** 2


# ============================================================================
# PROBLEM LAYOUT
# ============================================================================

@dataclass(frozen=True)
class HorizonLayout:
    """
    Position of each variable block in the decision vector.

    pr, pg: normalized rotor and generator power (N each); k: normalized
    energy (N + 1); sk: rated-energy overage (N); sw: speed-bound slack (N);
    fx: thrust epigraph (N, MinThrust epigraph form only); ss: stall slack
    (N, stall constraint only).
    """
    N: int
    blocks: dict[str, slice]

    @property
    def n(self) -> int:
        return max(s.stop for s in self.blocks.values())

    def __getitem__(self, name: str) -> slice:
        return self.blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def index(self, name: str, i: int) -> int:
        return self.blocks[name].start + i

    @classmethod
    def for_config(cls, cfg: MpcConfig) -> "HorizonLayout":
        N = cfg.N
        sizes = [("pr", N), ("pg", N), ("k", N + 1), ("sk", N), ("sw", N)]
        if cfg.strategy == Strategy.MIN_THRUST and cfg.min_thrust_form == "epigraph":
            sizes.append(("fx", N))
        if cfg.stall_constraint:
            sizes.append(("ss", N))
        blocks = {}
        start = 0
        for name, size in sizes:
            blocks[name] = slice(start, start + size)
            start += size
        return cls(N=N, blocks=blocks)


@dataclass
class HorizonPlan:
    """Predicted input and energy sequences in SI units."""
    P_r: np.ndarray
    P_g: np.ndarray
    K: np.ndarray
    slacks: dict[str, np.ndarray] = field(default_factory=dict)

    def dynamics_residual(self, params: TurbineParams, Ts: float) -> float:
        """Largest |K[i+1] - K[i] - Ts*(P_r[i] - P_g[i]/eta_g)| in J."""
        predicted = self.K[:-1] + Ts * (self.P_r - self.P_g / params.eta_g)
        return float(np.max(np.abs(self.K[1:] - predicted)))


def _scales(params: TurbineParams, cfg: MpcConfig) -> tuple[float, float, float]:
    return params.P_g_rated, params.K_rated, cfg.thrust_scale


def plan_from_solution(z: np.ndarray, layout: HorizonLayout, cfg: MpcConfig,
                       params: TurbineParams) -> HorizonPlan:
    P_n, K_n, F_n = _scales(params, cfg)
    slacks = {
        "rated_overage": z[layout["sk"]] * K_n,
        "speed": z[layout["sw"]] * K_n / cfg.speed_penalty,
    }
    if "fx" in layout:
        slacks["thrust_extra"] = z[layout["fx"]] * F_n
    if "ss" in layout:
        slacks["stall"] = z[layout["ss"]] / cfg.stall_penalty
    return HorizonPlan(
        P_r=z[layout["pr"]] * P_n,
        P_g=z[layout["pg"]] * P_n,
        K=z[layout["k"]] * K_n,
        slacks=slacks,
    )


class _Triplets:
    """Constraint rows assembled from (row, col, value) triplets."""

    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.rhs: list[float] = []

    def add_row(self, entries: list[tuple[int, float]], rhs: float):
        row = len(self.rhs)
        for col, value in entries:
            self.rows.append(row)
            self.cols.append(col)
            self.vals.append(value)
        self.rhs.append(rhs)

    def matrix(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.vals, (self.rows, self.cols)), shape=(len(self.rhs), self.n_cols))

    def vector(self) -> np.ndarray:
        return np.array(self.rhs, dtype=float)


class _Cost:
    """Quadratic cost 1/2 z'Hz + g'z; duplicate Hessian entries are summed."""

    def __init__(self, n: int):
        self.n = n
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.g = np.zeros(n)
        self.constant = 0.0

    def add_square(self, terms: list[tuple[int, float]], constant: float, weight: float):
        """weight * (sum_j c_j z_j + constant)^2."""
        for i, ci in terms:
            for j, cj in terms:
                self.rows.append(i)
                self.cols.append(j)
                self.vals.append(2.0 * weight * ci * cj)
            self.g[i] += 2.0 * weight * constant * ci
        self.constant += weight * constant ** 2

    def add_linear(self, j, value: float):
        self.g[j] += value

    def hessian(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.n, self.n))

    def value(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.hessian() @ z) + self.g @ z + self.constant)


def _difference_penalty(cost: _Cost, start: int, N: int, weight: float, previous: Optional[float]):
    """weight * sum_i (x_i - x_{i-1})^2 with x_{-1} = previous when given."""
    if weight == 0.0:
        return
    for i in range(1, N):
        cost.add_square([(start + i, 1.0), (start + i - 1, -1.0)], 0.0, weight)
    if previous is not None:
        cost.add_square([(start, 1.0)], -previous, weight)


def _state_scale(cfg: MpcConfig) -> float:
    return 1.0 / cfg.N if cfg.state_term_scaling == "mean" else 1.0


def _strategy_cost(cost: _Cost, ineq: "_Triplets", layout: HorizonLayout, cfg: MpcConfig,
                   params: TurbineParams, v: float, lin: Optional[LinearModels]):
    """alpha5..alpha7 terms; the thrust epigraph also adds its rows to ineq."""
    _, _, _, _, a5, a6, a7 = cfg.weights
    P_n, K_n, F_n = _scales(params, cfg)
    scale = _state_scale(cfg)
    k_states = range(layout["k"].start + 1, layout["k"].stop)

    if a5:
        for j in k_states:
            cost.add_linear(j, -a5 * scale)
    if a6:
        K_ref = kinetic_reference(params, cfg, v)
        k_ref = min(max(K_ref, params.K_min), params.K_max) / K_n
        for j in k_states:
            cost.add_square([(j, 1.0)], -k_ref, a6 * scale)
    if a7 and lin is not None and lin.thrust is not None:
        th = lin.thrust
        c_pr, c_k, c_0 = th.Q_FT * P_n / F_n, th.R_FT * K_n / F_n, th.S_FT / F_n
        for i in range(layout.N):
            terms = [(layout.index("pr", i), c_pr), (layout.index("k", i), c_k)]
            if "fx" in layout:
                ineq.add_row(terms + [(layout.index("fx", i), -1.0)], -c_0)
            else:
                cost.add_square(terms, c_0, a7 * scale)
        if "fx" in layout:
            cost.add_linear(layout["fx"], a7 * scale)


def strategy_term_value(z: np.ndarray, cfg: MpcConfig, params: TurbineParams, v: float,
                        lin: Optional[LinearModels]) -> float:
    """Cost contribution of the active strategy term at the decision vector z."""
    layout = HorizonLayout.for_config(cfg)
    cost = _Cost(layout.n)
    _strategy_cost(cost, _Triplets(layout.n), layout, cfg, params, v, lin)
    return cost.value(np.asarray(z, dtype=float))


def _wind_preview(v, N: int) -> np.ndarray:
    preview = np.atleast_1d(np.asarray(v, dtype=float))
    if preview.size == 1:
        return np.full(N, float(preview[0]))
    if preview.size != N:
        raise DimensionMismatch(f"wind preview has length {preview.size}, expected 1 or {N}")
    return preview


def build_problem(state: PlantState, v, P_ref_horizon, cfg: MpcConfig, env: PwaEnvelope,
                  lin: Optional[LinearModels], params: TurbineParams,
                  previous_inputs: Optional[tuple[float, float]] = None,
                  torque_cuts: Optional[list[tuple[float, float]]] = None) -> QpProblem:
    """
    Assemble the horizon QP.

    Args:
        state: Measured plant state (its speed fixes the initial energy)
        v: Wind speed in m/s, or a preview sequence of length N
        P_ref_horizon: Generator power reference per step (W, length N)
        cfg: Controller configuration (lambda_opt resolved)
        env: Available-power envelope
        lin: Thrust and stall models; None drops the rows that need them
        params: Turbine constants
        previous_inputs: Applied (P_r, P_g) of the last step for the rate terms
        torque_cuts: Tangent cuts of the torque limit (defaults to the standard grid)

    Returns:
        QpProblem over the HorizonLayout.for_config(cfg) decision vector

    Raises:
        DimensionMismatch: reference or wind preview of the wrong length
    """
    layout = HorizonLayout.for_config(cfg)
    N, n = layout.N, layout.n
    P_ref = np.asarray(P_ref_horizon, dtype=float).ravel()
    if P_ref.size != N:
        raise DimensionMismatch(f"reference horizon has length {P_ref.size}, expected {N}")
    winds = _wind_preview(v, N)

    P_n, K_n, F_n = _scales(params, cfg)
    Ts = cfg.sample_time
    c = Ts * P_n / K_n
    a1, a2, a3, a4 = cfg.weights[:4]
    K_meas = state.kinetic_energy(params)
    idx = layout.index

    # Dynamics
    eq = _Triplets(n)
    eq.add_row([(idx("k", 0), 1.0)], K_meas / K_n)
    for i in range(N):
        eq.add_row([
            (idx("k", i + 1), 1.0),
            (idx("k", i), -1.0),
            (idx("pr", i), -c),
            (idx("pg", i), c / params.eta_g),
        ], 0.0)

    ineq = _Triplets(n)

    # Available-power and torque-limit cuts
    if torque_cuts is None:
        torque_cuts = envelope.torque_limit_cuts(params, envelope.torque_cut_grid(params))
    cut_cache: dict[float, PwaCuts] = {}
    for i in range(N):
        cuts = cut_cache.get(winds[i])
        if cuts is None:
            cuts = cut_cache.setdefault(winds[i], envelope.envelope_cuts(env, float(winds[i])))
        for a, b in zip(cuts.slopes, cuts.intercepts):
            ineq.add_row([(idx("pr", i), 1.0), (idx("k", i), -a * K_n / P_n)], b / P_n)
        for a, b in torque_cuts:
            ineq.add_row([(idx("pg", i), 1.0), (idx("k", i), -a * K_n / P_n)], b / P_n)

    # Rated-energy overage and soft speed limits on the predicted energies
    k_low, k_high = params.K_min / K_n, params.K_max / K_n
    soft = 1.0 / cfg.speed_penalty
    for i in range(1, N + 1):
        ineq.add_row([(idx("k", i), 1.0), (idx("sk", i - 1), -1.0)], params.K_rated / K_n)
        ineq.add_row([(idx("k", i), -1.0), (idx("sw", i - 1), -soft)], -k_low)
        ineq.add_row([(idx("k", i), 1.0), (idx("sw", i - 1), -soft)], k_high)

    # Stall margin dT_r/dtheta <= -delta, softened
    if "ss" in layout and lin is not None and lin.stall is not None:
        st = lin.stall
        for i in range(N):
            g_n = 0.5 * params.rho * params.A_r * params.R * winds[i] ** 2
            ineq.add_row([
                (idx("pr", i), st.Q_Tr * P_n / g_n),
                (idx("k", i), st.R_Tr * K_n / g_n),
                (idx("ss", i), -1.0 / cfg.stall_penalty),
            ], (-cfg.delta - st.S_Tr) / g_n)

    # Cost
    cost = _Cost(n)
    for i in range(N):
        cost.add_square([(idx("pg", i), 1.0)], -P_ref[i] / P_n, a1)

    prev_pr = prev_pg = None
    if previous_inputs is not None:
        prev_pr, prev_pg = previous_inputs[0] / P_n, previous_inputs[1] / P_n
    _difference_penalty(cost, layout["pg"].start, N, a2 / Ts ** 2, prev_pg)
    _difference_penalty(cost, layout["pr"].start, N, a3 / Ts ** 2, prev_pr)

    cost.add_linear(layout["sk"], a4 * _state_scale(cfg))
    cost.add_linear(layout["sw"], 1.0)
    if "ss" in layout:
        cost.add_linear(layout["ss"], 1.0)
    _strategy_cost(cost, ineq, layout, cfg, params, float(winds[0]), lin)

    for j in range(n):
        cost.add_square([(j, 1.0)], 0.0, cfg.regularization)

    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    ub[layout["pg"]] = 1.0
    return QpProblem(
        H=cost.hessian(),
        g=cost.g,
        A_eq=eq.matrix(),
        b_eq=eq.vector(),
        A_in=ineq.matrix(),
        b_in=ineq.vector(),
        lb=lb,
        ub=ub,
    )


# ============================================================================
# COMMAND RECOVERY
# ============================================================================

def pitch_command(surface: AeroSurface, params: TurbineParams, P_r: float, K: float, v: float) -> float:
    """
    Pitch set-point delivering rotor power P_r at kinetic energy K.

    A target above what the surface can deliver falls back to the pitch of
    maximum Cp.
    """
    if K < K_EPS:
        raise DegenerateK(f"kinetic energy {K:.3g} J below {K_EPS} J")
    if v <= 0:
        raise OutOfDomain(f"wind speed must be positive, got {v}")
    cp_target = P_r / (0.5 * params.rho * params.A_r * v ** 3)
    lam = params.R / params.G_B * math.sqrt(2.0 * K / params.J) / v
    lam_lo, lam_hi = surface.lambda_bounds
    lam = min(max(lam, lam_lo), lam_hi)
    try:
        theta = aero.pitch_from_cp(surface, cp_target, lam)
    except Unachievable:
        _, theta = aero.max_cp(surface, lam)
    return min(max(float(theta), params.theta_min), params.theta_max)


def torque_command(params: TurbineParams, P_g: float, K: float) -> float:
    """Generator torque T_g = P_g / (eta_g * omega_g(K)), clamped to [0, T_g_max]."""
    omega_g = omega_from_energy(params, K)
    T_g = P_g / (params.eta_g * omega_g)
    return min(max(T_g, 0.0), params.T_g_max)


def steady_state_energy(params: TurbineParams, surface: AeroSurface, env: PwaEnvelope,
                        cfg: MpcConfig, v: float, P_g: float, samples: int = 200) -> float:
    """
    Equilibrium kinetic energy a strategy settles at for a constant demand.

    MaxKineticEnergy: the highest energy up to rated that can still deliver
    P_g. Tracking strategies: their reference, clamped to the speed limits.
    MinThrust: the feasible energy with the lowest steady thrust.
    """
    K_grid = np.linspace(params.K_min, params.K_max, samples)
    P_r = P_g / params.eta_g
    deliverable = envelope.eval_envelope(env, v, np.clip(K_grid, *env.K_range)) >= P_r

    if cfg.strategy in (Strategy.CONSTANT_TIP_SPEED_RATIO, Strategy.CONSTANT_ROTOR_SPEED):
        return float(np.clip(kinetic_reference(params, cfg, v), params.K_min, params.K_max))

    if not deliverable.any():
        return float(K_grid[np.argmax(envelope.eval_envelope(env, v, np.clip(K_grid, *env.K_range)))])

    if cfg.strategy == Strategy.MAX_KINETIC_ENERGY:
        candidates = K_grid[deliverable & (K_grid <= params.K_rated * (1 + 1e-12))]
        return float(candidates[-1]) if candidates.size else float(K_grid[deliverable][0])

    best_K, best_thrust = float(K_grid[deliverable][0]), math.inf
    for K in K_grid[deliverable]:
        omega_g = omega_from_energy(params, K)
        lam = params.R * omega_g / params.G_B / v
        try:
            theta = aero.pitch_from_cp(surface, P_r / (0.5 * params.rho * params.A_r * v ** 3), lam)
        except (Unachievable, OutOfDomain):
            continue
        force = 0.5 * params.rho * params.A_r * v ** 2 * aero.ct(surface, lam, theta)
        if force < best_thrust:
            best_K, best_thrust = float(K), force
    return best_K


# ============================================================================
# CONTROLLER
# ============================================================================

@dataclass(frozen=True)
class Measurement:
    """What the controller sees each step."""
    K: float
    theta: float
    v: float


@dataclass
class StepDiagnostics:
    """Solver and controller statistics of one control step."""
    status: str
    iterations: int = 0
    kkt_residual: float = math.nan
    primal_violation: float = math.nan
    objective: float = math.nan
    strategy_term: float = math.nan
    stall_slack: float = 0.0
    speed_slack: float = 0.0
    pitch_authority_lost: bool = False
    models_reused: bool = False
    degraded: bool = False

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


class Controller:
    """
    One controller instance per simulated turbine.

    Holds the previous command, applied inputs, plan (for warm starts) and
    linear models. Solver failures never propagate: the previous command is
    held and the step is counted as degraded. An inaccurate answer that
    misses the feasibility tolerance counts as a failure.
    """

    def __init__(self, params: TurbineParams, surface: AeroSurface, env: PwaEnvelope,
                 cfg: MpcConfig, settings: Optional[QpSettings] = None):
        cfg = cfg.resolved(surface)
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
        self.params = params
        self.surface = surface
        self.env = env
        self.cfg = cfg
        self.settings = settings or QpSettings()
        self.torque_cuts = envelope.torque_limit_cuts(params, envelope.torque_cut_grid(params))
        self.reset()

    def reset(self):
        self.previous_command: Optional[ActuatorCommand] = None
        self.previous_inputs: Optional[tuple[float, float]] = None
        self.previous_z: Optional[np.ndarray] = None
        self.previous_models: Optional[LinearModels] = None
        self.last_plan: Optional[HorizonPlan] = None
        self.diagnostics: list[StepDiagnostics] = []
        self.degraded_steps = 0
        self._authority_lost = False

    def configure(self, cfg: MpcConfig):
        """Swap the configuration; plans built for another layout are dropped."""
        cfg = cfg.resolved(self.surface)
        errors = cfg.validate()
        if errors:
            raise ConfigError(errors)
        if HorizonLayout.for_config(cfg) != HorizonLayout.for_config(self.cfg):
            self.previous_z = None
        self.cfg = cfg

    def _models(self, m: Measurement) -> tuple[Optional[LinearModels], bool, bool]:
        """(models, reused previous, authority lost now)."""
        try:
            models = linearize_at(self.surface, self.params, m.v, m.K, m.theta)
        except DownregError as e:
            logger.debug(f"Linearization failed at K={m.K:.4g}, theta={m.theta:.4f}: {e}")
            return self.previous_models, self.previous_models is not None, False

        if not models.pitch_authority_lost:
            self._authority_lost = False
            self.previous_models = models
            return models, False, False

        if not self._authority_lost:
            logger.warning(f"Pitch authority lost at theta={m.theta:.4f} rad, reusing the last thrust and stall models")
        self._authority_lost = True
        if self.previous_models is not None:
            return self.previous_models, True, True
        return models, False, True

    def _warm_start(self, n: int) -> Optional[np.ndarray]:
        z = self.previous_z
        if z is None or z.size != n:
            return None
        layout = HorizonLayout.for_config(self.cfg)
        shifted = z.copy()
        for block in layout.blocks.values():
            segment = z[block]
            shifted[block] = np.concatenate([segment[1:], segment[-1:]])
        return shifted

    def _fallback(self, m: Measurement, P_ref: float) -> ActuatorCommand:
        P_g = min(P_ref, self.params.P_g_rated)
        return ActuatorCommand(T_g=torque_command(self.params, P_g, m.K), theta_cmd=m.theta)

    def step(self, m: Measurement, P_ref_horizon, v_preview=None) -> ActuatorCommand:
        """
        One receding-horizon step.

        Args:
            m: Measured energy, pitch and wind
            P_ref_horizon: Generator power reference over the horizon (W)
            v_preview: Optional wind forecast of length N; defaults to holding m.v

        Returns:
            ActuatorCommand to hold until the next step
        """
        cfg = self.cfg
        P_ref = np.asarray(P_ref_horizon, dtype=float).ravel()
        models, reused, authority_lost = self._models(m)

        state = PlantState(omega_g=omega_from_energy(self.params, m.K), theta=m.theta)
        problem = build_problem(
            state, m.v if v_preview is None else v_preview, P_ref, cfg, self.env, models, self.params,
            previous_inputs=self.previous_inputs, torque_cuts=self.torque_cuts,
        )
        layout = HorizonLayout.for_config(cfg)
        solution = qp.solve(problem, warm_start=self._warm_start(layout.n), settings=self.settings)

        degraded = solution.status in (QpStatus.MAX_ITER, QpStatus.INFEASIBLE)
        detail = f"after {solution.iterations} iterations"
        if solution.status == QpStatus.INACCURATE:
            check = qp.validate(problem, solution.z, self.settings.feas_tol)
            degraded = not check["feasible"]
            detail = f"with worst violation {check['worst_violation']:.2e}"

        if degraded:
            self.degraded_steps += 1
            command = self.previous_command or self._fallback(m, float(P_ref[0]))
            logger.warning(
                f"QP {solution.status.value} {detail}, "
                f"holding previous command (degraded steps: {self.degraded_steps})"
            )
            self.diagnostics.append(StepDiagnostics(
                status=solution.status.value,
                iterations=solution.iterations,
                pitch_authority_lost=authority_lost,
                models_reused=reused,
                degraded=True,
            ))
            self.previous_command = command
            return command

        z = solution.z
        plan = plan_from_solution(z, layout, cfg, self.params)
        P_r0, P_g0 = float(plan.P_r[0]), float(plan.P_g[0])
        command = ActuatorCommand(
            T_g=torque_command(self.params, P_g0, m.K),
            theta_cmd=pitch_command(self.surface, self.params, P_r0, m.K, m.v),
        )
        self.diagnostics.append(StepDiagnostics(
            status=solution.status.value,
            iterations=solution.iterations,
            kkt_residual=solution.kkt_residual,
            primal_violation=solution.primal_violation,
            objective=solution.objective,
            strategy_term=strategy_term_value(z, cfg, self.params, m.v, models),
            stall_slack=float(np.max(plan.slacks.get("stall", np.zeros(1)))),
            speed_slack=float(np.max(plan.slacks["speed"])),
            pitch_authority_lost=authority_lost,
            models_reused=reused,
        ))
        logger.debug(
            f"MPC step K={m.K:.4g} P_r0={P_r0:.4g} P_g0={P_g0:.4g} status={solution.status.value} "
            f"iter={solution.iterations}"
        )

        self.previous_z = z
        self.last_plan = plan
        self.previous_inputs = (P_r0, P_g0)
        self.previous_command = command
        return command


def control_step(controller: Controller, measurement: Measurement, P_ref_horizon,
                 cfg: Optional[MpcConfig] = None) -> ActuatorCommand:
    """Module-level form of Controller.step; cfg, when given, replaces the controller's."""
    if cfg is not None and cfg.lambda_opt is None:
        cfg = replace(cfg, lambda_opt=controller.cfg.lambda_opt)
    if cfg is not None and cfg != controller.cfg:
        controller.configure(cfg)
    return controller.step(measurement, P_ref_horizon)
