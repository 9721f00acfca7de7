"""Exception hierarchy.

Every error raised by the library derives from :class:`IsoGuardError`. The CLI
maps the three families below onto exit codes (data errors -> 2, model
errors -> 3, anything else from bad usage -> 1).
"""
from __future__ import annotations


class IsoGuardError(Exception):
    """Base class for all library errors."""


class ParameterError(IsoGuardError, ValueError):
    """An argument is outside its legal range."""


# -- data side ---------------------------------------------------------------

class DataError(IsoGuardError):
    """Problem with input data (exit code 2 in the CLI)."""


class SchemaError(DataError):
    """Dimension / column mismatch between data and a schema or model."""


class EncodingError(DataError):
    """A raw value could not be encoded into a feature."""

    def __init__(self, message: str, column: str | None = None, row: int | None = None):
        self.column = column
        self.row = row
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class IngestError(DataError):
    """A file or stream could not be read."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InsufficientDataError(DataError):
    """Too few rows to fit a model."""


class DegenerateInputError(DataError):
    """Input has too few distinct values for the requested clustering.

    Callers hitting this with k > 1 should label every point normal.
    """


class UndefinedMetricError(DataError):
    """Metric is undefined for the given truth vector (e.g. single class)."""


# -- model side --------------------------------------------------------------

class ModelError(IsoGuardError):
    """Problem with a model or model file (exit code 3 in the CLI)."""


class StateError(ModelError):
    """Operation requires a fitted model."""


class ModelLoadError(ModelError):
    """Model document is corrupt or incomplete."""

    def __init__(self, message: str, section: str | None = None):
        self.section = section
        super().__init__(f"[{section}] {message}" if section else message)


class UnsupportedVersionError(ModelLoadError):
    """Model document declares a format version this build cannot read."""
