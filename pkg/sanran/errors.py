"""Exception hierarchy. Each class carries the process exit code the CLI reports."""


class SanranError(Exception):
    exit_code = 1


class ConfigError(SanranError):
    """Missing or invalid configuration (unknown key, inconsistent values)."""

    exit_code = 2


class DataError(SanranError):
    """Missing dataset files, malformed records, insufficient samples, leakage."""

    exit_code = 3


class ShapeError(DataError):
    """Tensor or array shapes do not agree."""


class DomainError(DataError):
    """Input outside the physical or mathematical domain of an operation."""


class NumericError(SanranError):
    """Non-finite values or a broken numerical invariant."""

    exit_code = 4
