"""Exception and warning types shared across the toolkit."""

from __future__ import annotations


class IdstatsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(IdstatsError):
    """Invalid run configuration or command-line usage."""


class DataError(IdstatsError):
    """Input data violates a precondition (schema, shape, or content)."""


class DataQualityWarning(UserWarning):
    """Non-fatal data oddity: dropped rows, constant columns, degenerate scales."""
