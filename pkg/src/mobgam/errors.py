"""Exception hierarchy shared across the package."""

from __future__ import annotations

from typing import Any


class MobgamError(Exception):
    """Base class for all package errors."""


class DataError(MobgamError, ValueError):
    """Input data is malformed, missing, or non-finite."""


class ConfigError(MobgamError, ValueError):
    """A configuration value (population, path, parameter) is invalid."""


class UnknownLevelError(DataError):
    """A factor label was not seen when the basis was constructed."""


class DimensionError(MobgamError, ValueError):
    """Requested basis dimension is incompatible with the data."""


class DegenerateCovariateError(MobgamError, ValueError):
    """A covariate has too few distinct values for the requested basis."""


class IdentifiabilityError(MobgamError, ValueError):
    """The penalized system has an unpenalized, unidentified direction."""

    def __init__(self, message: str, term: str | None = None) -> None:
        super().__init__(message)
        self.term = term


class NumericRangeError(MobgamError, ArithmeticError):
    """An intermediate quantity overflowed or became non-finite."""


class ConvergenceError(MobgamError, RuntimeError):
    """Smoothing-parameter optimisation hit its iteration limit."""

    def __init__(self, message: str, best_state: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.best_state = best_state or {}


class BenchmarkCoverageError(DataError):
    """A (state, weekday) benchmark cell has no January observations."""


class FeasibilityError(MobgamError, ValueError):
    """Target metrics cannot be realised by any set of trips."""


class EmptyWindowError(MobgamError, ValueError):
    """An averaging window contains no observations."""
