"""Exception family shared across the package.

The CLI maps these onto its exit-code contract, so new failure modes
should subclass one of them rather than raising bare builtins.
"""


class WclabError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(WclabError, ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class ConfigError(WclabError, ValueError):
    """A configuration value is out of its documented range."""


class FormatError(WclabError, ValueError):
    """An on-disk artifact does not match its documented format."""


class NumericError(WclabError, RuntimeError):
    """A computation produced NaN/Inf or diverged."""


class PowerIterationError(NumericError):
    """Power iteration failed to converge; carries the last estimate."""

    def __init__(self, message, last_estimate):
        super().__init__(message)
        self.last_estimate = last_estimate


class ProxError(NumericError):
    """Proximal subproblem could not be certified; carries the KKT gap."""

    def __init__(self, message, gap):
        super().__init__(message)
        self.gap = gap
