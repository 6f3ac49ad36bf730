"""
Aerodynamic coefficient surfaces.

Cp and Ct are tabulated on a (lambda, theta) grid and interpolated with
bicubic splines, so derivative fields are continuous. Cq = Cp / lambda is
always derived from Cp and never stored.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.optimize import bisect, newton

from services.errors import DegenerateLambda, OutOfDomain, Unachievable

logger = logging.getLogger(__name__)

BETZ_LIMIT = 16.0 / 27.0
CP_MIN = -0.2
LAMBDA_EPS = 1e-3

# Tolerance on pitch inversion targets above the achievable maximum
CP_TOLERANCE = 1e-4

# Pitch inversion near the maximum aims this far below it so the result
# stays strictly on the high-pitch branch.
BRANCH_OFFSET = 5e-7

PROFILE_LOSS = 0.02

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
_DOMAIN_SLACK = 1e-12


class SurfaceSource(str, Enum):
    """Where the coefficient grids came from."""
    PARAMETRIC_DEFAULT = "parametric-default"
    USER_TABLE = "user-table"


@dataclass(frozen=True)
class StallMargin:
    """Pitch sensitivity of aerodynamic torque at one operating point."""
    dtr_dtheta: float
    dcq_domega_sign: int

    def to_dict(self) -> dict:
        return {"dtr_dtheta": self.dtr_dtheta, "dcq_domega_sign": self.dcq_domega_sign}


@dataclass(frozen=True, eq=False)
class AeroSurface:
    """
    Cp and Ct grids over tip-speed ratio and pitch.

    Rows of cp_values/ct_values follow lambda_grid, columns follow theta_grid.
    The surface is immutable once built and can be shared across workers.
    """
    lambda_grid: np.ndarray
    theta_grid: np.ndarray
    cp_values: np.ndarray
    ct_values: np.ndarray
    source: SurfaceSource = SurfaceSource.PARAMETRIC_DEFAULT
    _cp_spline: RectBivariateSpline = field(init=False, repr=False)
    _ct_spline: RectBivariateSpline = field(init=False, repr=False)

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))
        for name in ("lambda_grid", "theta_grid", "cp_values", "ct_values"):
            array = np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        object.__setattr__(self, "_cp_spline", RectBivariateSpline(
            self.lambda_grid, self.theta_grid, self.cp_values, kx=3, ky=3, s=0))
        object.__setattr__(self, "_ct_spline", RectBivariateSpline(
            self.lambda_grid, self.theta_grid, self.ct_values, kx=3, ky=3, s=0))

    def validate(self) -> list[str]:
        """
        Check grid shapes, ordering and coefficient bounds.

        Returns:
            List of error messages (empty when the surface is usable)
        """
        errors = []
        lam = np.asarray(self.lambda_grid, dtype=float)
        theta = np.asarray(self.theta_grid, dtype=float)
        cp_values = np.asarray(self.cp_values, dtype=float)
        ct_values = np.asarray(self.ct_values, dtype=float)

        for name, grid in (("lambda", lam), ("theta", theta)):
            if grid.ndim != 1 or grid.size < 4:
                errors.append(f"{name} grid needs at least 4 points")
            elif not np.all(np.diff(grid) > 0):
                errors.append(f"{name} grid must be strictly increasing")

        expected = (lam.size, theta.size)
        for name, values in (("Cp", cp_values), ("Ct", ct_values)):
            if values.shape != expected:
                errors.append(f"{name} block has shape {values.shape}, expected {expected}")
            elif not np.all(np.isfinite(values)):
                errors.append(f"{name} block contains non-finite values")

        if cp_values.shape == expected and np.any(cp_values > BETZ_LIMIT + 1e-9):
            row, col = np.unravel_index(np.argmax(cp_values), cp_values.shape)
            errors.append(f"Cp exceeds the Betz limit at row {row}, column {col}")

        if lam.size and lam.min() <= 0:
            errors.append("lambda grid must be positive")

        return errors

    @property
    def lambda_bounds(self) -> tuple[float, float]:
        return float(self.lambda_grid[0]), float(self.lambda_grid[-1])

    @property
    def theta_bounds(self) -> tuple[float, float]:
        return float(self.theta_grid[0]), float(self.theta_grid[-1])

    def fingerprint_bytes(self) -> bytes:
        """Raw bytes identifying the tabulated data (used for cache keys)."""
        return b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.lambda_grid, self.theta_grid, self.cp_values, self.ct_values)
        )


# ============================================================================
# PARAMETRIC DEFAULT SURFACE
# ============================================================================

def parametric_cp(lam, theta):
    """
    Exponential Cp model with induced tip-speed-ratio correction.

    Pitch enters the formula in degrees. Values are clipped below at CP_MIN.

    Args:
        lam: Tip-speed ratio (scalar or array)
        theta: Pitch angle in radians (scalar or array)

    Returns:
        Power coefficient, same shape as the broadcast inputs
    """
    lam = np.asarray(lam, dtype=float)
    deg = np.degrees(np.asarray(theta, dtype=float))
    inv_li = 1.0 / (lam + 0.08 * deg) - 0.035 / (deg ** 3 + 1.0)
    cp_raw = 0.5176 * (116.0 * inv_li - 0.4 * deg - 5.0) * np.exp(-21.0 * inv_li) + 0.0068 * lam
    return np.maximum(cp_raw, CP_MIN)


def axial_induction(cp_values):
    """
    Momentum-theory induction factor a on [0, 1/3] with 4a(1-a)^2 = Cp.

    Negative Cp maps to a = 0; Cp above the Betz limit maps to a = 1/3.
    """
    c = np.clip(np.asarray(cp_values, dtype=float), 0.0, BETZ_LIMIT)
    flat = np.atleast_1d(c).ravel()
    a = newton(
        lambda x: 4.0 * x * (1.0 - x) ** 2 - flat,
        flat / 4.0,
        fprime=lambda x: 4.0 * (1.0 - x) * (1.0 - 3.0 * x),
        tol=1e-14,
        maxiter=100,
    )
    a = np.clip(np.asarray(a, dtype=float), 0.0, 1.0 / 3.0).reshape(np.shape(c))
    return a if np.ndim(cp_values) else float(a)


def parametric_ct(lam, theta):
    """
    Thrust coefficient consistent with momentum theory near the optimum.

    Ct = Cp+ / (1 - a(Cp) - PROFILE_LOSS * lambda), clipped to [0, 2].
    At fixed Cp it grows with lambda.
    """
    lam = np.asarray(lam, dtype=float)
    cp_values = parametric_cp(lam, theta)
    cp_pos = np.maximum(cp_values, 0.0)
    a = np.asarray(axial_induction(cp_pos), dtype=float)
    denominator = np.maximum(1.0 - a - PROFILE_LOSS * lam, 1e-6)
    return np.clip(cp_pos / denominator, 0.0, 2.0)


def default_grids() -> tuple[np.ndarray, np.ndarray]:
    """Lambda in [1, 15] step 0.1 and theta in [0, 0.52] rad step 0.01."""
    lambda_grid = np.round(np.linspace(1.0, 15.0, 141), 10)
    theta_grid = np.round(np.linspace(0.0, 0.52, 53), 10)
    return lambda_grid, theta_grid


def surface_from_functions(cp_func, ct_func, lambda_grid=None, theta_grid=None,
                           source: SurfaceSource = SurfaceSource.PARAMETRIC_DEFAULT) -> AeroSurface:
    """Tabulate vectorized coefficient functions onto a grid."""
    if lambda_grid is None or theta_grid is None:
        lambda_grid, theta_grid = default_grids()
    lam_mesh, theta_mesh = np.meshgrid(lambda_grid, theta_grid, indexing="ij")
    cp_values = np.broadcast_to(cp_func(lam_mesh, theta_mesh), lam_mesh.shape)
    ct_values = np.broadcast_to(ct_func(lam_mesh, theta_mesh), lam_mesh.shape)
    return AeroSurface(
        lambda_grid=np.asarray(lambda_grid, dtype=float),
        theta_grid=np.asarray(theta_grid, dtype=float),
        cp_values=np.array(cp_values, dtype=float),
        ct_values=np.array(ct_values, dtype=float),
        source=source,
    )


@lru_cache(maxsize=1)
def default_surface() -> AeroSurface:
    """Parametric default surface (built once per process)."""
    surface = surface_from_functions(parametric_cp, parametric_ct)
    logger.debug(
        f"Built parametric surface {surface.cp_values.shape}, "
        f"max Cp {surface.cp_values.max():.4f}"
    )
    return surface


def load_surface(path: str | Path) -> AeroSurface:
    """
    Load a user coefficient table.

    Raises:
        TableFormatError: malformed file, with row/column location
    """
    from utils.tables import parse_coefficient_table

    text = Path(path).read_text(encoding="utf-8")
    lambda_grid, theta_grid, cp_values, ct_values = parse_coefficient_table(text)
    logger.info(f"Loaded coefficient table {path} ({lambda_grid.size}x{theta_grid.size})")
    return AeroSurface(
        lambda_grid=lambda_grid,
        theta_grid=theta_grid,
        cp_values=cp_values,
        ct_values=ct_values,
        source=SurfaceSource.USER_TABLE,
    )


# ============================================================================
# EVALUATION
# ============================================================================

def _check_domain(surface: AeroSurface, lam, theta, margin_cells: int = 0):
    lam_arr = np.asarray(lam, dtype=float)
    theta_arr = np.asarray(theta, dtype=float)
    lam_grid, theta_grid = surface.lambda_grid, surface.theta_grid

    lam_lo, lam_hi = lam_grid[margin_cells], lam_grid[-1 - margin_cells]
    theta_lo, theta_hi = theta_grid[margin_cells], theta_grid[-1 - margin_cells]

    if not np.all(np.isfinite(lam_arr)) or not np.all(np.isfinite(theta_arr)):
        raise OutOfDomain("non-finite (lambda, theta) query")
    if np.any(lam_arr < lam_lo - _DOMAIN_SLACK) or np.any(lam_arr > lam_hi + _DOMAIN_SLACK):
        raise OutOfDomain(
            f"lambda {np.min(lam_arr):.4g}..{np.max(lam_arr):.4g} outside [{lam_lo:.4g}, {lam_hi:.4g}]"
        )
    if np.any(theta_arr < theta_lo - _DOMAIN_SLACK) or np.any(theta_arr > theta_hi + _DOMAIN_SLACK):
        raise OutOfDomain(
            f"theta {np.min(theta_arr):.4g}..{np.max(theta_arr):.4g} outside [{theta_lo:.4g}, {theta_hi:.4g}]"
        )
    return lam_arr, theta_arr


def _evaluate(spline: RectBivariateSpline, lam, theta, dx: int = 0, dy: int = 0):
    lam_b, theta_b = np.broadcast_arrays(np.asarray(lam, dtype=float), np.asarray(theta, dtype=float))
    values = spline.ev(lam_b.ravel(), theta_b.ravel(), dx=dx, dy=dy).reshape(lam_b.shape)
    return float(values) if values.ndim == 0 else values


def cp(surface: AeroSurface, lam, theta):
    """
    Power coefficient at (lambda, theta).

    Raises:
        OutOfDomain: query outside the tabulated grid
    """
    lam, theta = _check_domain(surface, lam, theta)
    return _evaluate(surface._cp_spline, lam, theta)


def ct(surface: AeroSurface, lam, theta):
    """Thrust coefficient at (lambda, theta)."""
    lam, theta = _check_domain(surface, lam, theta)
    return _evaluate(surface._ct_spline, lam, theta)


def cq(surface: AeroSurface, lam, theta):
    """
    Torque coefficient Cp / lambda.

    Raises:
        DegenerateLambda: lambda at or below LAMBDA_EPS
    """
    if np.any(np.asarray(lam, dtype=float) <= LAMBDA_EPS):
        raise DegenerateLambda(f"lambda={np.min(lam):.3g} too small for Cq")
    return cp(surface, lam, theta) / np.asarray(lam, dtype=float)


def partials(surface: AeroSurface, lam: float, theta: float, margin_cells: int = 1) -> dict[str, float]:
    """
    First partial derivatives of Cp, Ct and Cq in lambda and theta.

    Derivatives come from the spline itself. With margin_cells > 0 the point
    must lie that many grid cells away from every edge.

    Returns:
        Dict with keys dcp_dlambda, dcp_dtheta, dct_dlambda, dct_dtheta,
        dcq_dlambda, dcq_dtheta
    """
    lam, theta = _check_domain(surface, lam, theta, margin_cells)
    lam = float(lam)
    theta = float(theta)
    if lam <= LAMBDA_EPS:
        raise DegenerateLambda(f"lambda={lam:.3g} too small for Cq")

    cp_value = _evaluate(surface._cp_spline, lam, theta)
    dcp_dl = _evaluate(surface._cp_spline, lam, theta, dx=1)
    dcp_dt = _evaluate(surface._cp_spline, lam, theta, dy=1)

    return {
        "dcp_dlambda": dcp_dl,
        "dcp_dtheta": dcp_dt,
        "dct_dlambda": _evaluate(surface._ct_spline, lam, theta, dx=1),
        "dct_dtheta": _evaluate(surface._ct_spline, lam, theta, dy=1),
        "dcq_dlambda": dcp_dl / lam - cp_value / lam ** 2,
        "dcq_dtheta": dcp_dt / lam,
    }


def second_partials(surface: AeroSurface, lam: float, theta: float, margin_cells: int = 1) -> dict[str, float]:
    """Second derivatives of Cq needed by the stall linearization."""
    lam, theta = _check_domain(surface, lam, theta, margin_cells)
    lam = float(lam)
    theta = float(theta)
    if lam <= LAMBDA_EPS:
        raise DegenerateLambda(f"lambda={lam:.3g} too small for Cq")

    dcp_dt = _evaluate(surface._cp_spline, lam, theta, dy=1)
    return {
        "d2cq_dtheta2": _evaluate(surface._cp_spline, lam, theta, dy=2) / lam,
        "d2cq_dtheta_dlambda": (
            _evaluate(surface._cp_spline, lam, theta, dx=1, dy=1) / lam - dcp_dt / lam ** 2
        ),
    }


def stall_margin(surface: AeroSurface, params, v: float, lam: float, theta: float,
                 margin_cells: int = 1) -> StallMargin:
    """
    Pitch derivative of aerodynamic torque and the sign of dCq/domega.

    Args:
        surface: Coefficient surface
        params: TurbineParams (rho, A_r, R are used)
        v: Wind speed in m/s
        lam: Tip-speed ratio
        theta: Pitch angle in radians

    Returns:
        StallMargin with dtr_dtheta in N*m/rad
    """
    if v <= 0:
        raise OutOfDomain(f"wind speed must be positive, got {v}")
    d = partials(surface, lam, theta, margin_cells)
    scale = 0.5 * params.rho * params.A_r * params.R * v ** 2
    return StallMargin(
        dtr_dtheta=float(scale * d["dcq_dtheta"]),
        dcq_domega_sign=int(np.sign(d["dcq_dlambda"])),
    )


# ============================================================================
# MAXIMA AND PITCH INVERSION
# ============================================================================

def max_cp(surface: AeroSurface, lam) -> tuple:
    """
    Maximum of Cp over pitch at each lambda.

    A scan over the theta nodes picks the best cell pair, then a
    golden-section search refines inside it.

    Args:
        surface: Coefficient surface
        lam: Tip-speed ratio (scalar or 1-D array)

    Returns:
        (cp_max, theta_argmax) with the shape of lam
    """
    scalar = np.ndim(lam) == 0
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    _check_domain(surface, lam, surface.theta_grid[0])

    theta_grid = surface.theta_grid
    n_theta = theta_grid.size
    scan = _evaluate(surface._cp_spline, lam[:, None], theta_grid[None, :])
    best = np.argmax(scan, axis=1)
    node_value = scan[np.arange(lam.size), best]
    node_theta = theta_grid[best]

    lo = theta_grid[np.maximum(best - 1, 0)]
    hi = theta_grid[np.minimum(best + 1, n_theta - 1)]

    def f(x):
        return surface._cp_spline.ev(lam, x)

    for _ in range(60):
        c = hi - _GOLDEN * (hi - lo)
        d = lo + _GOLDEN * (hi - lo)
        keep_left = f(c) >= f(d)
        hi = np.where(keep_left, d, hi)
        lo = np.where(keep_left, lo, c)

    theta_ref = 0.5 * (lo + hi)
    value_ref = f(theta_ref)
    use_ref = value_ref > node_value
    cp_best = np.where(use_ref, value_ref, node_value)
    theta_best = np.where(use_ref, theta_ref, node_theta)

    if scalar:
        return float(cp_best[0]), float(theta_best[0])
    return cp_best, theta_best


def optimal_tip_speed_ratio(surface: AeroSurface) -> float:
    """Tip-speed ratio with the largest achievable Cp."""
    cp_best, _ = max_cp(surface, surface.lambda_grid)
    i = int(np.argmax(cp_best))
    lo = surface.lambda_grid[max(i - 1, 0)]
    hi = surface.lambda_grid[min(i + 1, surface.lambda_grid.size - 1)]
    fine = np.linspace(lo, hi, 201)
    fine_cp, _ = max_cp(surface, fine)
    return float(fine[int(np.argmax(fine_cp))])


def pitch_from_cp(surface: AeroSurface, cp_target: float, lam: float,
                  tolerance: float = CP_TOLERANCE) -> float:
    """
    Invert Cp in pitch on the high-pitch branch.

    Args:
        surface: Coefficient surface
        cp_target: Wanted power coefficient
        lam: Tip-speed ratio
        tolerance: How far cp_target may exceed the maximum before failing

    Returns:
        Pitch angle in radians with cp(lam, theta) = cp_target within 1e-6

    Raises:
        Unachievable: cp_target above the maximum by more than tolerance
    """
    cp_best, theta_best = max_cp(surface, float(lam))
    if cp_target > cp_best + tolerance:
        raise Unachievable(
            f"Cp target {cp_target:.5f} exceeds maximum {cp_best:.5f} at lambda={lam:.3f}"
        )

    theta_grid = surface.theta_grid
    theta_hi_bound = float(theta_grid[-1])
    if theta_best >= theta_hi_bound:
        return theta_hi_bound

    target = min(float(cp_target), cp_best - BRANCH_OFFSET)

    def residual(x):
        return float(surface._cp_spline.ev(lam, x)) - target

    # Walk up the pitch nodes until Cp drops through the target
    upper_nodes = theta_grid[theta_grid > theta_best]
    lower = float(theta_best)
    for node in upper_nodes:
        if residual(node) <= 0.0:
            return float(bisect(residual, lower, float(node), xtol=1e-13, maxiter=200))
        lower = float(node)

    return theta_hi_bound


def steady_state_pairs(surface: AeroSurface, cp_target: float) -> list[tuple[float, float]]:
    """
    Every (lambda, theta) on the lambda grid delivering cp_target on the
    high-pitch branch.
    """
    cp_best, _ = max_cp(surface, surface.lambda_grid)
    pairs = []
    for lam, best in zip(surface.lambda_grid, cp_best):
        if best < cp_target:
            continue
        theta = pitch_from_cp(surface, cp_target, float(lam))
        if abs(cp(surface, float(lam), theta) - cp_target) <= 1e-6:
            pairs.append((float(lam), float(theta)))
    return pairs


def stall_region_map(surface: AeroSurface) -> dict[str, np.ndarray]:
    """
    Sign structure of the Cq derivatives on the full grid.

    Returns:
        Dict with lambda/theta meshes, dcq_dtheta, dcq_dlambda and the
        boolean masks pitch_stall (dCq/dtheta > 0) and speed_stall
        (dCq/dlambda > 0)
    """
    lam_mesh, theta_mesh = np.meshgrid(surface.lambda_grid, surface.theta_grid, indexing="ij")
    cp_values = _evaluate(surface._cp_spline, lam_mesh, theta_mesh)
    dcp_dl = _evaluate(surface._cp_spline, lam_mesh, theta_mesh, dx=1)
    dcp_dt = _evaluate(surface._cp_spline, lam_mesh, theta_mesh, dy=1)
    dcq_dtheta = dcp_dt / lam_mesh
    dcq_dlambda = dcp_dl / lam_mesh - cp_values / lam_mesh ** 2
    return {
        "lambda": lam_mesh,
        "theta": theta_mesh,
        "cp": cp_values,
        "ct": _evaluate(surface._ct_spline, lam_mesh, theta_mesh),
        "dcq_dtheta": dcq_dtheta,
        "dcq_dlambda": dcq_dlambda,
        "pitch_stall": dcq_dtheta > 0,
        "speed_stall": dcq_dlambda > 0,
    }
