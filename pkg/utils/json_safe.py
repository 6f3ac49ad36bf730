"""
Safe JSON handling utilities.
Used for run manifests and envelope cache metadata, which carry numpy
scalars, enums and paths.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar('T')


def to_jsonable(obj: Any) -> Any:
    """Convert numpy values, enums, paths and tuples into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def safe_json_loads(
    json_str: str,
    default: Optional[T] = None,
    validator: Optional[Callable[[Any], bool]] = None
) -> Any:
    """
    Safely parse JSON string with optional validation.

    Args:
        json_str: The JSON string to parse
        default: Default value if parsing fails
        validator: Optional function to validate parsed data

    Returns:
        Parsed JSON data or default value
    """
    if not json_str:
        return default

    try:
        data = json.loads(json_str.strip())

        if validator and not validator(data):
            logger.warning("JSON validation failed")
            return default

        return data
    except json.JSONDecodeError as e:
        logger.warning(f"JSON decode error: {e}")
        return default


def safe_json_dumps(data: Any, compact: bool = True) -> str:
    """
    Serialize data to a JSON string after converting numpy and enum values.

    Args:
        data: Data to serialize
        compact: Whether to use compact formatting

    Returns:
        JSON string ("{}" when the data cannot be serialized)
    """
    try:
        cleaned = to_jsonable(data)
        if compact:
            return json.dumps(cleaned, separators=(',', ':'), ensure_ascii=False, sort_keys=True)
        return json.dumps(cleaned, indent=2, ensure_ascii=False, sort_keys=True)
    except (TypeError, ValueError) as e:
        logger.error(f"JSON serialization error: {e}")
        return "{}"

