"""
First-order models around the current operating point.

Cp and Ct are expanded in (K, theta); theta is then eliminated through the
Cp expansion so thrust and the stall margin become affine in (P_r, K).
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

from services import aero
from services.aero import AeroSurface
from services.errors import DegenerateK, OutOfDomain, PitchAuthorityLost
from services.turbine import K_EPS, TurbineParams

logger = logging.getLogger(__name__)

Q_EPS = 1e-3  # per rad


@dataclass(frozen=True)
class TaylorCoeffs:
    """Cp ~ q_P*theta + r_P*K + s_P and Ct ~ q_T*theta + r_T*K + s_T."""
    q_P: float
    r_P: float
    s_P: float
    q_T: float
    r_T: float
    s_T: float
    K_star: float
    theta_star: float
    v: float

    def cp_linear(self, K: float, theta: float) -> float:
        return self.q_P * theta + self.r_P * K + self.s_P

    def ct_linear(self, K: float, theta: float) -> float:
        return self.q_T * theta + self.r_T * K + self.s_T

    def theta_from_power(self, params: TurbineParams, P_r: float, K: float) -> float:
        """Pitch implied by the Cp expansion for a rotor power at K."""
        cp_target = P_r / (0.5 * params.rho * params.A_r * self.v ** 3)
        return (cp_target - self.r_P * K - self.s_P) / self.q_P


@dataclass(frozen=True)
class AffineThrust:
    """F_T ~ Q_FT*P_r + R_FT*K + S_FT (N)."""
    Q_FT: float
    R_FT: float
    S_FT: float

    def evaluate(self, P_r, K):
        return self.Q_FT * P_r + self.R_FT * K + self.S_FT


@dataclass(frozen=True)
class AffineStall:
    """dT_r/dtheta ~ Q_Tr*P_r + R_Tr*K + S_Tr (N*m/rad)."""
    Q_Tr: float
    R_Tr: float
    S_Tr: float

    def evaluate(self, P_r, K):
        return self.Q_Tr * P_r + self.R_Tr * K + self.S_Tr


@dataclass(frozen=True)
class LinearModels:
    """Models for one controller step."""
    coeffs: TaylorCoeffs
    thrust: Optional[AffineThrust]
    stall: Optional[AffineStall]
    pitch_authority_lost: bool = False


def _lambda_and_slope(params: TurbineParams, v: float, K: float) -> tuple[float, float]:
    if K < K_EPS:
        raise DegenerateK(f"expansion energy {K:.3g} J below {K_EPS} J")
    if v <= 0:
        raise OutOfDomain(f"wind speed must be positive, got {v}")
    lam = params.R / params.G_B * math.sqrt(2.0 * K / params.J) / v
    dlam_dK = params.R / (params.G_B * v * math.sqrt(2.0 * params.J * K))
    return lam, dlam_dK


def taylor_coeffs(surface: AeroSurface, params: TurbineParams, v: float,
                  K_star: float, theta_star: float) -> TaylorCoeffs:
    """
    Expand Cp and Ct in (K, theta) around (K_star, theta_star).

    Raises:
        OutOfDomain: expansion point off the surface
        DegenerateK: K_star below K_EPS
    """
    lam, dlam_dK = _lambda_and_slope(params, v, K_star)
    d = aero.partials(surface, lam, theta_star, margin_cells=0)
    cp_star = aero.cp(surface, lam, theta_star)
    ct_star = aero.ct(surface, lam, theta_star)

    q_P = d["dcp_dtheta"]
    r_P = d["dcp_dlambda"] * dlam_dK
    q_T = d["dct_dtheta"]
    r_T = d["dct_dlambda"] * dlam_dK

    coeffs = TaylorCoeffs(
        q_P=q_P,
        r_P=r_P,
        s_P=cp_star - q_P * theta_star - r_P * K_star,
        q_T=q_T,
        r_T=r_T,
        s_T=ct_star - q_T * theta_star - r_T * K_star,
        K_star=K_star,
        theta_star=theta_star,
        v=v,
    )
    if not all(math.isfinite(x) for x in (coeffs.q_P, coeffs.r_P, coeffs.s_P, coeffs.q_T, coeffs.r_T, coeffs.s_T)):
        raise OutOfDomain(f"non-finite Taylor coefficients at K={K_star:.4g}, theta={theta_star:.4g}")
    return coeffs


def _check_authority(coeffs: TaylorCoeffs):
    if abs(coeffs.q_P) < Q_EPS:
        raise PitchAuthorityLost(
            f"|dCp/dtheta|={abs(coeffs.q_P):.2e} below {Q_EPS} at theta={coeffs.theta_star:.4f}"
        )


def thrust_affine(coeffs: TaylorCoeffs, params: TurbineParams) -> AffineThrust:
    """
    Affine thrust in (P_r, K) after eliminating theta.

    Raises:
        PitchAuthorityLost: |q_P| < Q_EPS
    """
    _check_authority(coeffs)
    v = coeffs.v
    ratio = coeffs.q_T / coeffs.q_P
    q_area = 0.5 * params.rho * params.A_r * v ** 2
    return AffineThrust(
        Q_FT=ratio / v,
        R_FT=q_area * (coeffs.r_T - coeffs.r_P * ratio),
        S_FT=q_area * (coeffs.s_T - coeffs.s_P * ratio),
    )


def stall_affine(surface: AeroSurface, params: TurbineParams, v: float,
                 K_star: float, theta_star: float,
                 coeffs: Optional[TaylorCoeffs] = None) -> AffineStall:
    """
    Affine model of g = dT_r/dtheta = 0.5*rho*A_r*R*v^2 * dCq/dtheta in (P_r, K).

    g is linearized in (K, theta) and theta is eliminated with the Cp
    expansion, the same way as for thrust.

    Raises:
        PitchAuthorityLost: |q_P| < Q_EPS
    """
    if coeffs is None:
        coeffs = taylor_coeffs(surface, params, v, K_star, theta_star)
    _check_authority(coeffs)

    lam, dlam_dK = _lambda_and_slope(params, v, K_star)
    first = aero.partials(surface, lam, theta_star, margin_cells=0)
    second = aero.second_partials(surface, lam, theta_star, margin_cells=0)

    scale = 0.5 * params.rho * params.A_r * params.R * v ** 2
    g_star = scale * first["dcq_dtheta"]
    g_theta = scale * second["d2cq_dtheta2"]
    g_K = scale * second["d2cq_dtheta_dlambda"] * dlam_dK
    g_0 = g_star - g_theta * theta_star - g_K * K_star

    power_scale = 0.5 * params.rho * params.A_r * v ** 3
    ratio = g_theta / coeffs.q_P
    return AffineStall(
        Q_Tr=ratio / power_scale,
        R_Tr=g_K - ratio * coeffs.r_P,
        S_Tr=g_0 - ratio * coeffs.s_P,
    )


def linearize_at(surface: AeroSurface, params: TurbineParams, v: float,
                 K: float, theta: float) -> LinearModels:
    """
    All models at the measured point. Loss of pitch authority is reported in
    the returned flag instead of raised.
    """
    coeffs = taylor_coeffs(surface, params, v, K, theta)
    try:
        thrust = thrust_affine(coeffs, params)
        stall = stall_affine(surface, params, v, K, theta, coeffs=coeffs)
    except PitchAuthorityLost as e:
        logger.debug(f"Pitch authority lost: {e}")
        return LinearModels(coeffs=coeffs, thrust=None, stall=None, pitch_authority_lost=True)
    return LinearModels(coeffs=coeffs, thrust=thrust, stall=stall)
