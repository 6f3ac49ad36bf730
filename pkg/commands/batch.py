"""
batch: the same scenario under several strategies.
"""

import argparse
import logging

from commands import prepare
from config import config, load_run_config
from services import harness
from services.mpc import Strategy
from utils.time import run_stamp

logger = logging.getLogger(__name__)


def parse_strategies(text: str) -> list[Strategy]:
    """'all' or a comma-separated list of names and aliases."""
    if text.strip().lower() == "all":
        return list(Strategy)
    return [Strategy.parse(name) for name in text.split(",") if name.strip()]


def register(subparsers) -> None:
    parser = subparsers.add_parser("batch", help="Run several strategies on the configured scenario")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--strategies", default="all", help="'all' or a comma-separated list")
    parser.add_argument("--out", help="Output directory (default: <output>/<stamp>-batch)")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes (default: MAX_WORKERS)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    strategies = parse_strategies(args.strategies)
    surface, env = prepare(cfg)

    results = harness.run_batch(
        cfg.scenario,
        cfg.turbine,
        surface,
        cfg.mpc,
        strategies,
        env=env,
        settings=cfg.solver,
        max_workers=args.workers or config.MAX_WORKERS,
    )
    out_dir = args.out or cfg.output.resolved_directory / f"{run_stamp()}-batch"
    harness.write_run_outputs(results, out_dir, cfg.to_dict())

    for result in results:
        m = result.metrics
        logger.info(
            f"{result.strategy:<24} tracking {m.tracking_time_after_saturation:6.1f}s | "
            f"mean K {m.mean_K_before / 1e6:6.2f} MJ | mean thrust {m.mean_thrust_before / 1e3:7.1f} kN | "
            f"degraded {m.degraded_steps}"
        )
    print(out_dir)
    return 0
