"""
CSV output for simulation runs.

All numeric output is written at full double precision with a fixed
column order, so identical runs produce byte-identical files.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
RUN_CSV_VERSION = 1

RUN_COLUMNS = [
    "strategy", "t", "v", "omega_g", "K", "theta", "theta_cmd", "T_g",
    "P_r", "P_g", "P_ref", "P_av_hat", "P_av", "F_T", "dtr_dtheta", "dcq_dtheta",
]
METRIC_COLUMNS = [
    "strategy", "mean_K_before", "mean_thrust_before", "tracking_time_after_saturation",
    "tracking_rmse_before", "constraint_violation_count", "degraded_steps",
]
DIAGNOSTIC_COLUMNS = [
    "strategy", "t", "status", "iterations", "kkt_residual", "primal_violation", "objective",
    "strategy_term", "stall_slack", "speed_slack", "pitch_authority_lost", "models_reused", "degraded",
]


def write_frame(frame: pd.DataFrame, path: str | Path, columns: list[str] | None = None) -> Path:
    """Write a DataFrame as comma-separated text with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise KeyError(f"missing columns for {path.name}: {missing}")
        frame = frame[columns]
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def read_frame(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def power_long_format(run: pd.DataFrame) -> pd.DataFrame:
    """t, strategy, series in {P_g, P_ref, P_av_hat}, value."""
    long = run.melt(
        id_vars=["t", "strategy"],
        value_vars=["P_g", "P_ref", "P_av_hat"],
        var_name="series",
        value_name="value",
    )
    return long.sort_values(["strategy", "series", "t"], kind="mergesort").reset_index(drop=True)


def loads_frame(run: pd.DataFrame) -> pd.DataFrame:
    """t, strategy, F_T."""
    return run[["t", "strategy", "F_T"]].reset_index(drop=True)


def stall_region_label(dcq_dtheta: np.ndarray, dcq_dlambda: np.ndarray) -> np.ndarray:
    pitch = np.asarray(dcq_dtheta) > 0
    speed = np.asarray(dcq_dlambda) > 0
    labels = np.full(pitch.shape, "attached", dtype=object)
    labels[pitch & ~speed] = "pitch-stall"
    labels[speed & ~pitch] = "speed-stall"
    labels[pitch & speed] = "both"
    return labels


def stallmap_frame(region_map: dict[str, np.ndarray], trajectories: pd.DataFrame) -> pd.DataFrame:
    """
    Surface grid with derivative signs and region labels, followed by each
    strategy's realized (lambda, theta) path.

    Args:
        region_map: Output of aero.stall_region_map
        trajectories: Columns strategy, t, lambda, theta
    """
    grid = pd.DataFrame({
        "kind": "grid",
        "strategy": "",
        "t": np.nan,
        "lambda": region_map["lambda"].ravel(),
        "theta": region_map["theta"].ravel(),
        "cp": region_map["cp"].ravel(),
        "ct": region_map["ct"].ravel(),
        "dcq_dtheta": region_map["dcq_dtheta"].ravel(),
        "dcq_dlambda": region_map["dcq_dlambda"].ravel(),
        "region": stall_region_label(region_map["dcq_dtheta"], region_map["dcq_dlambda"]).ravel(),
    })
    path = trajectories[["strategy", "t", "lambda", "theta"]].copy()
    path.insert(0, "kind", "trajectory")
    return pd.concat([grid, path], ignore_index=True)[list(grid.columns)]
