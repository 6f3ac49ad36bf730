"""
Utils package initialization.
"""

from utils.time import (
    now,
    format_datetime,
    iso_stamp,
    run_stamp,
    format_duration,
)

from utils.json_safe import (
    to_jsonable,
    safe_json_loads,
    safe_json_dumps,
)

__all__ = [
    # Time utilities
    "now",
    "format_datetime",
    "iso_stamp",
    "run_stamp",
    "format_duration",
    # JSON utilities
    "to_jsonable",
    "safe_json_loads",
    "safe_json_dumps",
]
