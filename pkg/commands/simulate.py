"""
simulate: one closed-loop run.
"""

import argparse
import logging

from commands import prepare
from config import load_run_config
from services import harness
from utils.time import format_duration, run_stamp

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("simulate", help="Run one strategy through the configured scenario")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--strategy", help="Override mpc.strategy")
    parser.add_argument("--out", help="Output directory (default: <output>/<stamp>-<strategy>)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.strategy:
        cfg = cfg.with_strategy(args.strategy)
    surface, env = prepare(cfg)

    result = harness.run_scenario(cfg.scenario, cfg.turbine, surface, cfg.mpc, env, cfg.solver)
    out_dir = args.out or cfg.output.resolved_directory / f"{run_stamp()}-{result.strategy}"
    harness.write_run_outputs([result], out_dir, cfg.to_dict())

    m = result.metrics
    logger.info(
        f"{result.strategy}: tracked {m.tracking_time_after_saturation:.1f}s after saturation, "
        f"mean K {m.mean_K_before / 1e6:.2f} MJ, mean thrust {m.mean_thrust_before / 1e3:.1f} kN, "
        f"wall time {format_duration(result.wall_time)}"
    )
    print(out_dir)
    return 0
