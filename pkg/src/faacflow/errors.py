"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: ConfigError -> 2,
DataError -> 3, EvaluationError -> 4.
"""

from __future__ import annotations

from dataclasses import dataclass


class FaacflowError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FaacflowError):
    """A configuration file or parameter set is invalid."""


class DataError(FaacflowError):
    """Input data violates a contract (bad rows, unmapped classes, schema mismatch)."""


class EvaluationError(FaacflowError):
    """An evaluation run failed; message carries (repetition, fold) context."""


@dataclass(frozen=True)
class RowError:
    """A recoverable per-row parse problem. Parsing continues past it."""

    line_no: int
    message: str
    raw: tuple[str, ...]

    def __str__(self) -> str:
        return f"line {self.line_no}: {self.message}"
