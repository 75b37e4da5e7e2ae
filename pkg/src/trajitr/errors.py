"""Exception hierarchy shared across the package."""

from __future__ import annotations

from typing import Any


class ITRError(Exception):
    """Base class for all package errors."""


class DomainError(ITRError, ValueError):
    """An argument lies outside the domain of a function (e.g. non-finite input)."""


class EmptyInputError(ITRError, ValueError):
    pass


class ConfigError(ITRError, ValueError):
    """Invalid configuration or scenario parameters."""


class DataError(ITRError, ValueError):
    """Malformed or inconsistent input data."""


class RankDeficiencyError(ITRError, ValueError):
    """The GLS normal-equations matrix is singular."""


class UnderIdentifiedError(ITRError, ValueError):
    """Fewer observations than model parameters."""


class DegenerateIntervalError(ITRError, ValueError):
    """The study interval [t1, tm] has zero length."""


class StratificationError(ITRError, ValueError):
    """A cross-validation fold lost one of the treatment groups."""


class UndefinedValueError(ITRError, ValueError):
    """No subject's assignment agrees with the rule, so the value is undefined."""


class ConvergenceError(ITRError, RuntimeError):
    """An iterative fit exhausted its budget.

    The best fit found so far is available as ``best``.
    """

    def __init__(self, message: str, best: Any = None):
        super().__init__(message)
        self.best = best
