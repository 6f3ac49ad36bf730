"""
Timezone utilities for run manifests and output directory names.
"""

from datetime import datetime
from typing import Optional

import pytz


def get_timezone() -> pytz.BaseTzInfo:
    """Get the configured timezone object."""
    from config import config

    return pytz.timezone(config.TIMEZONE)


def now() -> datetime:
    """Get current datetime in configured timezone."""
    return datetime.now(get_timezone())


def format_datetime(dt: datetime) -> str:
    """Format datetime to full string."""
    return dt.strftime("%Y-%m-%d %H:%M:%S")


def iso_stamp(dt: Optional[datetime] = None) -> str:
    """ISO-8601 timestamp with offset, for manifests."""
    return (dt or now()).isoformat(timespec="seconds")


def run_stamp(dt: Optional[datetime] = None) -> str:
    """Compact stamp usable in directory names, e.g. 20260314-091502."""
    return (dt or now()).strftime("%Y%m%d-%H%M%S")


def format_duration(seconds: float) -> str:
    """Format a wall-clock duration to a human-readable string."""
    total = int(round(seconds))
    if total < 0:
        return "0s"

    minutes, secs = divmod(total, 60)
    hours, minutes = divmod(minutes, 60)

    parts = []
    if hours > 0:
        parts.append(f"{hours}h")
    if minutes > 0:
        parts.append(f"{minutes}m")
    if secs > 0 or not parts:
        parts.append(f"{secs}s")
    return " ".join(parts)
