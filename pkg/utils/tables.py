"""
Plain-text coefficient tables.

    # comments and blank lines are ignored
    lambda: 2 4 6 8 10
    theta:  0 0.05 0.1 0.15
    cp:                      (optional marker)
    <one row of len(theta) values per lambda>
    ct:                      (optional marker)
    <one row of len(theta) values per lambda>

Row numbers in errors are 1-based file lines, columns are 1-based value
positions within the line.
"""

import logging

import numpy as np

from services.errors import TableFormatError

logger = logging.getLogger(__name__)


def _parse_values(tokens: list[str], line_no: int, first_column: int = 1) -> list[float]:
    values = []
    for offset, token in enumerate(tokens):
        try:
            value = float(token)
        except ValueError:
            raise TableFormatError(f"not a number: {token!r}", row=line_no, column=first_column + offset)
        if not np.isfinite(value):
            raise TableFormatError(f"non-finite value {token!r}", row=line_no, column=first_column + offset)
        values.append(value)
    return values


def _parse_axis(line: str, line_no: int, name: str) -> np.ndarray:
    head, _, rest = line.partition(":")
    if head.strip().lower() != name:
        raise TableFormatError(f"expected '{name}:' header", row=line_no, column=1)
    values = np.array(_parse_values(rest.split(), line_no), dtype=float)
    if values.size < 4:
        raise TableFormatError(f"{name} axis needs at least 4 values, got {values.size}", row=line_no)
    steps = np.diff(values)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 2
        raise TableFormatError(f"{name} axis must be strictly increasing", row=line_no, column=bad)
    return values


def parse_coefficient_table(text: str) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Parse a coefficient table.

    Args:
        text: File contents

    Returns:
        (lambda_grid, theta_grid, cp_values, ct_values)

    Raises:
        TableFormatError: malformed header, wrong row length, non-numeric
            or out-of-range values, or missing rows
    """
    lines = [
        (number, raw.split("#", 1)[0].strip())
        for number, raw in enumerate(text.splitlines(), start=1)
    ]
    lines = [(number, line) for number, line in lines if line]
    if len(lines) < 2:
        raise TableFormatError("table needs 'lambda:' and 'theta:' header lines")

    lambda_grid = _parse_axis(lines[0][1], lines[0][0], "lambda")
    theta_grid = _parse_axis(lines[1][1], lines[1][0], "theta")
    n_rows, n_cols = lambda_grid.size, theta_grid.size

    blocks: dict[str, list[list[float]]] = {"cp": [], "ct": []}
    cp_lines: list[int] = []
    current = "cp"
    last_line = lines[1][0]
    for number, line in lines[2:]:
        last_line = number
        marker = line.rstrip(":").strip().lower()
        if line.endswith(":") and marker in blocks:
            current = marker
            continue
        if len(blocks[current]) == n_rows:
            if current == "cp":
                current = "ct"
            else:
                raise TableFormatError("more data rows than lambda values", row=number)
        tokens = line.split()
        if len(tokens) != n_cols:
            raise TableFormatError(
                f"{current.upper()} row has {len(tokens)} values, expected {n_cols}",
                row=number,
                column=min(len(tokens), n_cols) + 1,
            )
        blocks[current].append(_parse_values(tokens, number))
        if current == "cp":
            cp_lines.append(number)

    for name in ("cp", "ct"):
        if len(blocks[name]) != n_rows:
            raise TableFormatError(
                f"{name.upper()} block has {len(blocks[name])} rows, expected {n_rows}", row=last_line
            )

    cp_values = np.array(blocks["cp"], dtype=float)
    ct_values = np.array(blocks["ct"], dtype=float)

    from services.aero import BETZ_LIMIT

    if np.any(cp_values > BETZ_LIMIT + 1e-9):
        row, col = np.unravel_index(np.argmax(cp_values), cp_values.shape)
        raise TableFormatError(f"Cp {cp_values[row, col]:.4f} exceeds the Betz limit", row=cp_lines[int(row)],
                               column=int(col) + 1)

    logger.debug(f"Parsed coefficient table {n_rows}x{n_cols}")
    return lambda_grid, theta_grid, cp_values, ct_values
