#!/usr/bin/env python3
"""
Health check script: environment, run configuration and numerical stack.
"""
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from config import config, load_run_config
from services import aero
from services.errors import DownregError
from utils.time import format_datetime, now


def health_check(config_path: str = "configs/default.toml") -> bool:
    """Run health checks."""
    print(f"Running health checks at {format_datetime(now())}...")

    errors = config.validate()
    if errors:
        print("❌ Environment errors:")
        for error in errors:
            print(f"   - {error}")
        return False
    print("✅ Environment valid")
    print(f"✅ Output directory: {config.OUTPUT_DIR}")
    print(f"✅ Envelope cache: {config.ENVELOPE_CACHE_DIR}")
    print(f"✅ Timezone: {config.TIMEZONE}")

    try:
        run = load_run_config(config_path)
        surface = run.surface.load()
    except DownregError as e:
        print(f"❌ Run configuration {config_path}: {e}")
        return False
    print(f"✅ Run configuration: {config_path} ({run.mpc.strategy.value}, N={run.mpc.N})")

    lam_opt = aero.optimal_tip_speed_ratio(surface)
    cp_opt, _ = aero.max_cp(surface, lam_opt)
    print(f"✅ Surface {surface.source.value}: lambda_opt={lam_opt:.2f}, Cp_max={float(cp_opt):.3f}")

    try:
        import osqp
        print(f"✅ OSQP {getattr(osqp, '__version__', 'unknown')}")
    except ImportError:
        print("❌ osqp is not installed")
        return False

    return True


if __name__ == "__main__":
    success = health_check(*sys.argv[1:2])
    sys.exit(0 if success else 1)
