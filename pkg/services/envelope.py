"""
Available-power envelope.

P_av(v, K) is the best rotor power over pitch at the tip-speed ratio implied
by K. Per wind grid point it is fitted by a concave min-of-affine function
of K in normalized form (divided by v^3), and interpolated linearly in wind
speed. Tangent cuts over-approximate the concave torque-limit curve.

Energies whose tip-speed ratio falls off the coefficient surface get no
power credit, and every fitted row is kept nonnegative across K_range.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from services import aero
from services.aero import AeroSurface
from services.errors import NotConcave, OutOfDomain
from services.turbine import TurbineParams, kinetic_energy

logger = logging.getLogger(__name__)

CACHE_VERSION = 2
CONCAVITY_TOL = 0.01
FIT_ITERATIONS = 50

# Largest acceptable fit error, relative to the wind speed's peak P_av
FIT_TOLERANCE = 0.01

# The minimax chord search subsamples longer inputs to this many points
MINIMAX_POINTS = 400

_CACHE_ARRAYS = ("wind_grid", "slopes", "intercepts", "k_windows", "fit_errors")


@dataclass(frozen=True)
class EnvelopeOptions:
    """How the envelope is sampled and fitted."""
    wind_min: float = 3.0
    wind_max: float = 25.0
    wind_step: float = 0.5
    segments: int = 5
    samples: int = 200
    fit: str = "two-sided"
    cache: bool = True

    def validate(self) -> list[str]:
        errors = []
        if not 0 < self.wind_min < self.wind_max:
            errors.append("envelope wind range must satisfy 0 < wind_min < wind_max")
        if self.wind_step <= 0:
            errors.append("envelope wind_step must be positive")
        if self.segments < 1:
            errors.append("envelope segments must be at least 1")
        if self.samples < 2 * max(self.segments, 1):
            errors.append("envelope samples must be at least twice the segment count")
        if self.fit not in ("two-sided", "inner"):
            errors.append(f"envelope fit must be 'two-sided' or 'inner', got {self.fit!r}")
        return errors

    def wind_grid(self) -> np.ndarray:
        n = int(round((self.wind_max - self.wind_min) / self.wind_step)) + 1
        return np.round(np.linspace(self.wind_min, self.wind_min + (n - 1) * self.wind_step, n), 10)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class PwaEnvelope:
    """
    Concave piecewise-affine available-power model.

    slopes[i, j] (W/J per (m/s)^3) and intercepts[i, j] (W per (m/s)^3)
    describe P_hat(v_i, K) = min_j(slopes[i, j] * K + intercepts[i, j]) * v_i^3.
    Slopes are non-increasing along j. fit_errors[i] is the largest
    |P_hat - P_av| over the fit window relative to the peak P_av there.
    """
    wind_grid: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    K_range: tuple[float, float]
    k_windows: np.ndarray
    fingerprint: str = ""
    fit_errors: Optional[np.ndarray] = None

    @property
    def k(self) -> int:
        return int(self.slopes.shape[1])

    @property
    def segments(self) -> list[list[tuple[float, float]]]:
        return [
            [(float(a), float(b)) for a, b in zip(row_a, row_b)]
            for row_a, row_b in zip(self.slopes, self.intercepts)
        ]

    def validate(self) -> list[str]:
        errors = []
        if self.wind_grid.ndim != 1 or not np.all(np.diff(self.wind_grid) > 0):
            errors.append("wind grid must be strictly increasing")
        if self.slopes.shape != self.intercepts.shape or self.slopes.shape[0] != self.wind_grid.size:
            errors.append("segment arrays do not match the wind grid")
        elif np.any(np.diff(self.slopes, axis=1) > 0):
            errors.append("segment slopes must be non-increasing")
        if not self.K_range[0] < self.K_range[1]:
            errors.append("K_range must be a proper interval")
        elif not errors:
            ends = np.array(self.K_range)
            for i, v in enumerate(self.wind_grid):
                values = _grid_value(self, i, ends)
                if np.min(values) < -1e-9 * max(float(np.max(np.abs(values))), 1.0):
                    errors.append(f"envelope is negative on K_range at v={v:g} m/s")
        if self.fit_errors is not None and self.fit_errors.shape != self.wind_grid.shape:
            errors.append("fit_errors do not match the wind grid")
        return errors

    def poorly_fitted(self, tolerance: float = FIT_TOLERANCE) -> list[float]:
        """Wind speeds whose fit error exceeds tolerance."""
        if self.fit_errors is None:
            return []
        return [float(v) for v, e in zip(self.wind_grid, self.fit_errors) if e > tolerance]


@dataclass(frozen=True)
class PwaCuts:
    """Min-of-affine rows P <= slope * K + intercept valid at one wind speed (W, J)."""
    slopes: np.ndarray
    intercepts: np.ndarray
    breakpoints: np.ndarray

    def evaluate(self, K) -> np.ndarray:
        K = np.asarray(K, dtype=float)
        return np.min(self.slopes[:, None] * np.atleast_1d(K)[None, :] + self.intercepts[:, None], axis=0)


# ============================================================================
# AVAILABLE POWER
# ============================================================================

def lambda_from_energy(params: TurbineParams, K, v: float):
    """lambda(K) = R / G_B * sqrt(2K / J) / v."""
    return params.R / params.G_B * np.sqrt(2.0 * np.asarray(K, dtype=float) / params.J) / v


def energy_from_lambda(params: TurbineParams, lam, v: float):
    """Inverse of lambda_from_energy."""
    omega_g = np.asarray(lam, dtype=float) * v * params.G_B / params.R
    return 0.5 * params.J * omega_g ** 2


def available_power(params: TurbineParams, surface: AeroSurface, v: float, K):
    """
    Best aerodynamic power over pitch at kinetic energy K (clamped at zero).

    Args:
        params: Turbine constants
        surface: Coefficient surface
        v: Wind speed in m/s
        K: Kinetic energy in J (scalar or array)

    Returns:
        Available power in W

    Raises:
        OutOfDomain: implied tip-speed ratio outside the surface grid
    """
    if v <= 0:
        raise OutOfDomain(f"wind speed must be positive, got {v}")
    lam = lambda_from_energy(params, K, v)
    cp_best, _ = aero.max_cp(surface, lam)
    power = 0.5 * params.rho * params.A_r * v ** 3 * np.maximum(cp_best, 0.0)
    return float(power) if np.ndim(power) == 0 else power


def fit_window(params: TurbineParams, surface: AeroSurface, v: float) -> tuple[float, float]:
    """Part of the speed-limit range whose tip-speed ratio lies on the surface."""
    lam_lo, lam_hi = surface.lambda_bounds
    lo = max(params.K_min, float(energy_from_lambda(params, lam_lo, v)))
    hi = min(params.K_max, float(energy_from_lambda(params, lam_hi, v)))
    if not lo < hi:
        raise OutOfDomain(f"no kinetic-energy window maps onto the surface at v={v} m/s")
    return lo, hi


# ============================================================================
# PIECEWISE-AFFINE FITTING
# ============================================================================

def concavity_violation(x: np.ndarray, y: np.ndarray) -> float:
    """
    Largest increase between consecutive secant slopes, normalized by the
    sample range. Zero or negative for concave samples.
    """
    secants = np.diff(y) / np.diff(x)
    if secants.size < 2:
        return 0.0
    scale = max(np.ptp(y), np.max(np.abs(y)), 1e-300) / np.ptp(x)
    return float(np.max(np.diff(secants)) / scale)


def concave_majorant(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least concave majorant of the samples, evaluated at x (upper hull)."""
    hull: list[int] = []
    for i in range(x.size):
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (x[a] - x[o]) * (y[i] - y[o]) - (y[a] - y[o]) * (x[i] - x[o])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return np.interp(x, x[hull], y[hull])


def lower_envelope(slopes: np.ndarray, intercepts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Pieces of min_j(slopes * x + intercepts) that are active somewhere on
    the real line.

    Returns:
        (slopes, intercepts, breakpoints) with slopes strictly decreasing and
        breakpoints[i] where piece i hands over to piece i+1
    """
    order = np.lexsort((intercepts, -slopes))
    a_sorted, b_sorted = slopes[order], intercepts[order]

    kept_a: list[float] = []
    kept_b: list[float] = []
    for a, b in zip(a_sorted, b_sorted):
        if kept_a and a == kept_a[-1]:
            # Equal slopes: the smaller intercept came first
            continue
        while len(kept_a) >= 2:
            a1, b1 = kept_a[-2], kept_b[-2]
            a2, b2 = kept_a[-1], kept_b[-1]
            x12 = (b2 - b1) / (a1 - a2)
            x13 = (b - b1) / (a1 - a)
            if x13 <= x12:
                kept_a.pop()
                kept_b.pop()
            else:
                break
        kept_a.append(a)
        kept_b.append(b)

    a_out = np.array(kept_a)
    b_out = np.array(kept_b)
    breaks = (b_out[1:] - b_out[:-1]) / (a_out[:-1] - a_out[1:])
    return a_out, b_out, breaks


def _min_affine(lines: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.min(lines[:, 0][:, None] * x[None, :] + lines[:, 1][:, None], axis=0)


def _refine_partition(x: np.ndarray, y: np.ndarray, labels: np.ndarray) -> Optional[np.ndarray]:
    """Alternate least-squares line fits and nearest-active-piece assignment."""
    lines = None
    for _ in range(FIT_ITERATIONS):
        fitted = []
        for j in np.unique(labels):
            mask = labels == j
            if np.count_nonzero(mask) < 2 or np.ptp(x[mask]) == 0:
                continue
            a, b = np.polyfit(x[mask], y[mask], 1)
            fitted.append((a, b))
        if not fitted:
            break
        lines = np.array(fitted)
        values = lines[:, 0][:, None] * x[None, :] + lines[:, 1][:, None]
        new_labels = np.argmin(values, axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return lines


def _initial_partitions(x: np.ndarray, k: int) -> list[np.ndarray]:
    """Deterministic restarts: equal-K, equal-count and equal-sqrt(K) cells."""
    n = x.size
    span = x[-1] - x[0]
    equal_k = np.minimum(((x - x[0]) / span * k).astype(int), k - 1)
    equal_count = np.minimum(np.arange(n) * k // n, k - 1)
    root = np.sqrt(np.maximum(x - x[0], 0.0))
    equal_root = np.minimum((root / max(root[-1], 1e-300) * k).astype(int), k - 1)
    return [equal_k, equal_count, equal_root]


def _chord_table(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Residual spread of every chord.

    For i < j, with r_m = y[m] - chord_ij(x[m]) over m in [i, j],
    spread[i, j] is half of max(r) - min(r) and offset[i, j] the midpoint
    of that range. Entries on and below the diagonal are infinite.
    """
    n = x.size
    spread = np.full((n, n), np.inf)
    offset = np.zeros((n, n))
    local = np.arange(n)
    for i in range(n - 1):
        xs, ys = x[i:] - x[i], y[i:] - y[i]
        slope = ys[1:] / xs[1:]
        residual = ys[None, :] - slope[:, None] * xs[None, :]
        covered = local[None, :n - i] <= local[1:n - i, None]
        hi = np.where(covered, residual, -np.inf).max(axis=1)
        lo = np.where(covered, residual, np.inf).min(axis=1)
        spread[i, i + 1:] = 0.5 * (hi - lo)
        offset[i, i + 1:] = 0.5 * (hi + lo)
    return spread, offset


def _minimax_chords(x: np.ndarray, y: np.ndarray, k: int) -> np.ndarray:
    """
    At most k lines along sample chords, knots chosen by dynamic programming
    to minimize the largest residual spread. Each line is shifted to the
    middle of its own residual range.
    """
    if x.size > MINIMAX_POINTS:
        pick = np.unique(np.round(np.linspace(0, x.size - 1, MINIMAX_POINTS)).astype(int))
        x, y = x[pick], y[pick]
    n = x.size
    spread, offset = _chord_table(x, y)

    cost = spread[0].copy()
    parents = [np.zeros(n, dtype=int)]
    best_cost, best_p = cost[-1], 1
    columns = np.arange(n)
    for p in range(2, k + 1):
        stacked = np.maximum(cost[:, None], spread)
        parent = np.argmin(stacked, axis=0)
        cost = stacked[parent, columns]
        parents.append(parent)
        if cost[-1] < best_cost:
            best_cost, best_p = cost[-1], p

    knots = [n - 1]
    for p in range(best_p, 0, -1):
        knots.append(int(parents[p - 1][knots[-1]]))
    knots.reverse()

    lines = []
    for i, j in zip(knots[:-1], knots[1:]):
        a = (y[j] - y[i]) / (x[j] - x[i])
        lines.append((a, y[i] - a * x[i] + offset[i, j]))
    return np.array(lines)


def _candidate_lines(x: np.ndarray, y: np.ndarray, k: int) -> list[np.ndarray]:
    """Minimax chords plus one least-squares refinement per restart."""
    candidates = [_minimax_chords(x, y, k)]
    for labels in _initial_partitions(x, k):
        lines = _refine_partition(x, y, labels)
        if lines is not None:
            candidates.append(lines)
    return candidates


def _center(lines: np.ndarray, x: np.ndarray, y: np.ndarray, inner: bool) -> np.ndarray:
    """Vertical shift balancing the worst over- and under-estimate (inner: no over-estimate)."""
    residual = _min_affine(lines, x) - y
    shift = residual.max() if inner else 0.5 * (residual.max() + residual.min())
    shifted = lines.copy()
    shifted[:, 1] -= shift
    return shifted


def _keep_nonnegative(lines: np.ndarray, K_range: tuple[float, float]) -> np.ndarray:
    """Raise a concave min-of-affine until it is nonnegative at both ends of K_range."""
    deficit = -min(float(np.min(_min_affine(lines, np.asarray(K_range, dtype=float)))), 0.0)
    if deficit == 0.0:
        return lines
    raised = lines.copy()
    raised[:, 1] += deficit
    return raised


def _best_lines(candidates: list[np.ndarray], x: np.ndarray, y: np.ndarray, inner: bool,
                K_range: Optional[tuple[float, float]] = None) -> tuple[np.ndarray, float]:
    """Canonical, centered candidate with the smallest largest error on (x, y)."""
    best_lines, best_error = None, np.inf
    for lines in candidates:
        a, b, _ = lower_envelope(lines[:, 0], lines[:, 1])
        lines = _center(np.column_stack([a, b]), x, y, inner)
        if K_range is not None:
            lines = _keep_nonnegative(lines, K_range)
        error = float(np.max(np.abs(_min_affine(lines, x) - y)))
        if error < best_error:
            best_lines, best_error = lines, error
    return best_lines, best_error


def _pieces(lines: np.ndarray, k: int) -> list[tuple[float, float]]:
    pieces = [(float(a), float(b)) for a, b in lines]
    while len(pieces) < k:
        pieces.append(pieces[-1])
    return pieces


def fit_pwa(samples, k: int, inner: bool = False) -> list[tuple[float, float]]:
    """
    Fit a concave min-of-affine function to (K, P) samples.

    Candidates are the minimax chord partition and three least-squares
    partition refinements; the one with the smallest largest residual wins.

    Args:
        samples: Sequence of (K, P) pairs or an (n, 2) array
        k: Number of affine pieces
        inner: Shift the fit down so it never exceeds the samples

    Returns:
        k (slope, intercept) pairs with non-increasing slopes; when fewer
        pieces are active the last one is repeated

    Raises:
        NotConcave: samples fail the second-difference check
        ValueError: fewer than 2k samples or repeated K values
    """
    data = np.asarray(samples, dtype=float)
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError("samples must be (K, P) pairs")
    if data.shape[0] < 2 * k:
        raise ValueError(f"need at least {2 * k} samples for {k} segments, got {data.shape[0]}")

    order = np.argsort(data[:, 0], kind="stable")
    x, y = data[order, 0], data[order, 1]
    if np.any(np.diff(x) <= 0):
        raise ValueError("sample K values must be distinct")

    violation = concavity_violation(x, y)
    if violation > CONCAVITY_TOL:
        raise NotConcave(f"samples are not concave (normalized slope increase {violation:.3g})")

    scale = max(np.max(np.abs(y)), 1e-300)
    if np.ptp(y) <= 1e-12 * scale:
        return [(0.0, float(np.mean(y)))] * k

    lines, _ = _best_lines(_candidate_lines(x, y, k), x, y, inner)
    return _pieces(lines, k)


# ============================================================================
# ENVELOPE CONSTRUCTION AND EVALUATION
# ============================================================================

def envelope_fingerprint(params: TurbineParams, surface: AeroSurface, options: EnvelopeOptions) -> str:
    """SHA-256 over surface grids, turbine parameters and fit options."""
    digest = hashlib.sha256()
    digest.update(surface.fingerprint_bytes())
    digest.update(json.dumps(params.to_dict(), sort_keys=True).encode("utf-8"))
    options_key = {k: v for k, v in options.to_dict().items() if k != "cache"}
    digest.update(json.dumps(options_key, sort_keys=True).encode("utf-8"))
    digest.update(str(CACHE_VERSION).encode("utf-8"))
    return digest.hexdigest()


def build_envelope(params: TurbineParams, surface: AeroSurface,
                   options: Optional[EnvelopeOptions] = None,
                   cache_dir: Optional[str | Path] = None) -> PwaEnvelope:
    """
    Sample P_av across K_range at each wind grid point and fit it.

    Samples outside the fit window carry zero power. Candidates come from
    the samples themselves and, when they fail the concavity check, from
    their concave majorant. The winner has the smallest error on the fit
    window after being raised to stay nonnegative on K_range.

    Args:
        params: Turbine constants
        surface: Coefficient surface
        options: Sampling and fit options
        cache_dir: Directory for the envelope cache (None disables it)

    Returns:
        PwaEnvelope covering the configured wind range, with per-wind fit errors
    """
    options = options or EnvelopeOptions()
    fingerprint = envelope_fingerprint(params, surface, options)

    cache_path = None
    if cache_dir is not None and options.cache:
        cache_path = Path(cache_dir) / f"envelope_{fingerprint[:16]}.npz"
        cached = load_envelope(cache_path, expected_fingerprint=fingerprint)
        if cached is not None:
            logger.info(f"Envelope cache hit: {cache_path}")
            return cached

    winds = options.wind_grid()
    k = options.segments
    inner = options.fit == "inner"
    K_range = (params.K_min, params.K_max)
    K_grid = np.linspace(K_range[0], K_range[1], options.samples)
    slopes = np.zeros((winds.size, k))
    intercepts = np.zeros((winds.size, k))
    windows = np.zeros((winds.size, 2))
    fit_errors = np.zeros(winds.size)
    fallbacks = 0

    for i, v in enumerate(winds):
        lo, hi = fit_window(params, surface, float(v))
        K_samples = np.unique(np.concatenate([K_grid, [lo, hi]]))
        inside = (K_samples >= lo) & (K_samples <= hi)
        normalized = np.zeros_like(K_samples)
        normalized[inside] = available_power(params, surface, float(v), K_samples[inside]) / v ** 3

        candidates = _candidate_lines(K_samples, normalized, k)
        if concavity_violation(K_samples, normalized) > CONCAVITY_TOL:
            candidates += _candidate_lines(K_samples, concave_majorant(K_samples, normalized), k)
            fallbacks += 1
            logger.debug(f"P_av samples at v={v:.1f} m/s are not concave; adding concave-majorant candidates")

        x_fit, y_fit = K_samples[inside], normalized[inside]
        lines, error = _best_lines(candidates, x_fit, y_fit, inner, K_range)
        pieces = _pieces(lines, k)
        slopes[i] = [p[0] for p in pieces]
        intercepts[i] = [p[1] for p in pieces]
        windows[i] = (lo, hi)
        fit_errors[i] = error / max(float(np.max(y_fit)), 1e-300)

    if fallbacks:
        logger.warning(f"Fitted the concave majorant at {fallbacks} of {winds.size} wind speeds")

    env = PwaEnvelope(
        wind_grid=winds,
        slopes=slopes,
        intercepts=intercepts,
        K_range=K_range,
        k_windows=windows,
        fingerprint=fingerprint,
        fit_errors=fit_errors,
    )
    logger.info(
        f"Built envelope: {winds.size} wind speeds, {k} segments, "
        f"{fallbacks} concave-majorant fallbacks, worst fit error {fit_errors.max():.2%}"
    )
    poor = env.poorly_fitted()
    if poor:
        logger.warning(
            f"Envelope fit error above {FIT_TOLERANCE:.0%} at {len(poor)} wind speeds: "
            f"{', '.join(f'{v:g}' for v in poor)} m/s"
        )

    if cache_path is not None:
        save_envelope(env, cache_path)
    return env


def _bracket(env: PwaEnvelope, v: float) -> tuple[int, int, float]:
    grid = env.wind_grid
    if not grid[0] - 1e-12 <= v <= grid[-1] + 1e-12:
        raise OutOfDomain(f"wind speed {v} outside envelope range [{grid[0]}, {grid[-1]}]")
    hi = int(np.clip(np.searchsorted(grid, v, side="left"), 1, grid.size - 1))
    lo = hi - 1
    theta = (v - grid[lo]) / (grid[hi] - grid[lo])
    theta = min(max(theta, 0.0), 1.0)
    return lo, hi, float(theta)


def _grid_value(env: PwaEnvelope, i: int, K) -> np.ndarray:
    K = np.atleast_1d(np.asarray(K, dtype=float))
    v = env.wind_grid[i]
    return np.min(env.slopes[i][:, None] * K[None, :] + env.intercepts[i][:, None], axis=0) * v ** 3


def eval_envelope(env: PwaEnvelope, v: float, K):
    """
    Wind-interpolated envelope (1 - Theta) * P_hat(v1, K) + Theta * P_hat(v2, K).

    Raises:
        OutOfDomain: v outside the wind grid or K outside K_range
    """
    K_arr = np.asarray(K, dtype=float)
    lo_K, hi_K = env.K_range
    if np.any(K_arr < lo_K * (1 - 1e-12)) or np.any(K_arr > hi_K * (1 + 1e-12)):
        raise OutOfDomain(f"K outside envelope range [{lo_K:.4g}, {hi_K:.4g}] J")
    lo, hi, theta = _bracket(env, v)
    values = (1.0 - theta) * _grid_value(env, lo, K_arr) + theta * _grid_value(env, hi, K_arr)
    return float(values[0]) if K_arr.ndim == 0 else values


def envelope_cuts(env: PwaEnvelope, v: float) -> PwaCuts:
    """
    Exact min-of-affine form of the wind-interpolated envelope at v.

    The sum of two concave piecewise-affine functions is affine between the
    union of their breakpoints, so at most 2k - 1 pieces result.
    """
    lo, hi, theta = _bracket(env, v)
    weights = [(lo, 1.0 - theta), (hi, theta)]
    parts = []
    for i, w in weights:
        if w == 0.0:
            continue
        scale = w * env.wind_grid[i] ** 3
        a, b, breaks = lower_envelope(env.slopes[i] * scale, env.intercepts[i] * scale)
        parts.append((a, b, breaks))

    all_breaks = np.unique(np.concatenate([p[2] for p in parts])) if parts else np.array([])

    if all_breaks.size == 0:
        slope = sum(p[0][0] for p in parts)
        intercept = sum(p[1][0] for p in parts)
        return PwaCuts(np.array([slope]), np.array([intercept]), all_breaks)

    # One point inside every interval between breakpoints
    gaps = np.diff(all_breaks)
    pad = max(float(np.max(gaps)) if gaps.size else 0.0, abs(float(all_breaks[-1])), 1.0)
    points = np.concatenate([
        [all_breaks[0] - pad],
        0.5 * (all_breaks[:-1] + all_breaks[1:]),
        [all_breaks[-1] + pad],
    ])

    slopes = np.zeros(points.size)
    intercepts = np.zeros(points.size)
    for a, b, _ in parts:
        active = np.argmin(a[:, None] * points[None, :] + b[:, None], axis=0)
        slopes += a[active]
        intercepts += b[active]

    keep = np.concatenate([[True], np.diff(slopes) != 0])
    return PwaCuts(slopes[keep], intercepts[keep], all_breaks)


def max_available_power(env: PwaEnvelope, v: float) -> float:
    """Largest envelope value over K_range (attained at a breakpoint or an end)."""
    cuts = envelope_cuts(env, v)
    lo_K, hi_K = env.K_range
    candidates = np.concatenate([[lo_K, hi_K], cuts.breakpoints[(cuts.breakpoints > lo_K) & (cuts.breakpoints < hi_K)]])
    return float(np.max(eval_envelope(env, v, candidates)))


def torque_limit_cuts(params: TurbineParams, K_grid) -> list[tuple[float, float]]:
    """
    Tangents to f(K) = eta_g * sqrt(2K/J) * T_g_max at each grid point.

    Returns:
        (slope W/J, intercept W) pairs; their minimum majorizes f
    """
    K_grid = np.asarray(K_grid, dtype=float)
    if K_grid.size < 3:
        raise ValueError("torque-limit cuts need at least 3 grid points")
    f = params.eta_g * np.sqrt(2.0 * K_grid / params.J) * params.T_g_max
    slope = params.eta_g * params.T_g_max / np.sqrt(2.0 * params.J * K_grid)
    intercept = f - slope * K_grid
    return [(float(a), float(b)) for a, b in zip(slope, intercept)]


def torque_cut_grid(params: TurbineParams, n: int = 8) -> np.ndarray:
    """Tangent points spaced geometrically in speed across the speed limits."""
    omegas = np.geomspace(params.omega_g_min, params.omega_g_max, n)
    return kinetic_energy(params, omegas)


# ============================================================================
# CACHE
# ============================================================================

def save_envelope(env: PwaEnvelope, path: str | Path) -> Path:
    """Write the envelope arrays and JSON metadata into one .npz file."""
    from utils.json_safe import safe_json_dumps

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"version": CACHE_VERSION, "fingerprint": env.fingerprint, "K_range": list(env.K_range)}
    with open(path, "wb") as handle:
        np.savez(
            handle,
            wind_grid=env.wind_grid,
            slopes=env.slopes,
            intercepts=env.intercepts,
            k_windows=env.k_windows,
            fit_errors=env.fit_errors if env.fit_errors is not None else np.full(env.wind_grid.size, np.nan),
            metadata=np.array(safe_json_dumps(metadata)),
        )
    logger.info(f"Saved envelope cache {path}")
    return path


def load_envelope(path: str | Path, expected_fingerprint: Optional[str] = None) -> Optional[PwaEnvelope]:
    """
    Read a cached envelope.

    Returns:
        The envelope, or None when the file is missing, unreadable, from an
        older format version or built for different inputs
    """
    from utils.json_safe import safe_json_loads

    path = Path(path)
    if not path.exists():
        return None
    try:
        with np.load(path, allow_pickle=False) as data:
            metadata = safe_json_loads(str(data["metadata"]), default={})
            arrays = {name: np.array(data[name]) for name in _CACHE_ARRAYS}
    except (OSError, KeyError, ValueError) as e:
        logger.warning(f"Ignoring unreadable envelope cache {path}: {e}")
        return None

    if metadata.get("version") != CACHE_VERSION:
        logger.warning(f"Envelope cache {path} has format version {metadata.get('version')}, rebuilding")
        return None
    if expected_fingerprint is not None and metadata.get("fingerprint") != expected_fingerprint:
        logger.warning(f"Envelope cache {path} is stale, rebuilding")
        return None

    return PwaEnvelope(
        wind_grid=arrays["wind_grid"],
        slopes=arrays["slopes"],
        intercepts=arrays["intercepts"],
        K_range=tuple(metadata["K_range"]),
        k_windows=arrays["k_windows"],
        fingerprint=metadata.get("fingerprint", ""),
        fit_errors=None if np.all(np.isnan(arrays["fit_errors"])) else arrays["fit_errors"],
    )
