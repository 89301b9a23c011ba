"""Exception hierarchy shared by the laboratory modules."""
from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by the laboratory."""

    exit_code = 1


class DomainError(LabError, ValueError):
    """A parameter lies outside the range where an operation is defined."""

    exit_code = 2


class ConfigError(LabError, ValueError):
    """Experiment configuration failed validation."""

    exit_code = 2


class ModelMismatchError(LabError, ValueError):
    """An operation was called with an increment model it does not support."""

    exit_code = 2


class RegimeMismatchError(LabError, ValueError):
    """A regime or branch label does not fit the supplied arguments."""

    exit_code = 2


class NumericalDiagnosticError(LabError):
    """A numerical diagnostic crossed its failure threshold."""

    exit_code = 3

    def __init__(self, message: str, **context: object) -> None:
        super().__init__(message)
        self.context = context


class GridResolutionError(NumericalDiagnosticError):
    """Grid mass loss exceeded the configured tolerance."""


class DegenerateEstimateError(NumericalDiagnosticError):
    """An estimate rests on too few samples or a vanishing normaliser."""


__all__ = [
    "LabError",
    "DomainError",
    "ConfigError",
    "ModelMismatchError",
    "RegimeMismatchError",
    "NumericalDiagnosticError",
    "GridResolutionError",
    "DegenerateEstimateError",
]
