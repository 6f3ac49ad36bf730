"""
Exception hierarchy for the down-regulation services.
Every error raised on purpose by the domain code derives from DownregError.
"""


class DownregError(Exception):
    """Base class for all domain errors."""
    pass


class OutOfDomain(DownregError):
    """Query outside the tabulated (lambda, theta) domain or another validity range."""
    pass


class DegenerateLambda(DownregError):
    """Tip-speed ratio too close to zero for Cq = Cp / lambda."""
    pass


class Unachievable(DownregError):
    """Requested power coefficient exceeds what any pitch angle delivers."""
    pass


class NumericalBlowup(DownregError):
    """Generator speed left the admissible band during plant integration."""

    def __init__(self, message: str, t: float = float("nan"), omega_g: float = float("nan")):
        super().__init__(message)
        self.t = t
        self.omega_g = omega_g


class NotConcave(DownregError):
    """Samples handed to the PWA fitter are not concave within tolerance."""
    pass


class DegenerateK(DownregError):
    """Kinetic energy too small to invert for rotor speed."""
    pass


class PitchAuthorityLost(DownregError):
    """dCp/dtheta vanished at the expansion point; theta cannot be eliminated."""
    pass


class DimensionMismatch(DownregError):
    """Inconsistent array or matrix dimensions."""
    pass


class ConfigError(DownregError):
    """Invalid configuration. Carries every problem found, not just the first."""

    def __init__(self, errors: list[str] | str):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TableFormatError(ConfigError):
    """Malformed user coefficient table."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        location = ""
        if row is not None:
            location = f" (row {row}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{location}")
        self.row = row
        self.column = column
