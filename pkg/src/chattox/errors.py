"""Exception types shared across the package.

Grouped so the command-line layer can map them onto exit codes:
configuration and usage problems, data problems, everything else.
"""

from __future__ import annotations


class ChattoxError(Exception):
    """Base class for package-specific errors."""


class ConfigError(ChattoxError):
    """Invalid or inconsistent configuration."""


class CorpusFormatError(ChattoxError):
    """Malformed corpus record; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ChattoxError):
    """Well-formed input that violates a data invariant."""


class SizingError(ChattoxError):
    """Not enough data to satisfy the requested sizes."""


class BudgetError(ChattoxError):
    """Token budget too small to hold even the evaluated message."""


class RegistrationError(ChattoxError):
    """Special-token registration conflict."""


class UndefinedMetricError(ChattoxError):
    """Metric undefined for the given inputs (e.g. a class is absent)."""


class DegenerateClassError(ChattoxError):
    """Training or weighting requested on single-class data."""


class PhaseError(ChattoxError):
    """Checkpoint used in the wrong lifecycle phase."""


class CoverageError(ChattoxError):
    """Required records are missing for part of the population."""


class DisjointnessError(ChattoxError):
    """Player sets that must not overlap do overlap."""


DATA_ERRORS = (CorpusFormatError, ValidationError, SizingError, CoverageError,
               DisjointnessError)
