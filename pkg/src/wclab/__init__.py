"""wclab: worst-case-consistency semi-supervised training at desk scale.

A small laboratory around one idea: train a classifier so that the most
inconsistent of K augmented variants of each unlabeled sample agrees with
the model's own confident prediction. The package also evaluates the
closed-form generalization-bound formulas attached to that objective and
checks the convergence guarantee of the alternating max/descent loop on
an exactly solvable minimax testbed.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FormatError,
    NumericError,
    PowerIterationError,
    ProxError,
    ShapeError,
    WclabError,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "NumericError",
    "PowerIterationError",
    "ProxError",
    "ShapeError",
    "WclabError",
    "__version__",
]
