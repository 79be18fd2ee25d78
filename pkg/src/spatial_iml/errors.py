"""Exception hierarchy shared by all modules.

Each family maps onto one CLI exit code.
"""


class SpatialImlError(Exception):
    exit_code = 1


class ConfigError(SpatialImlError, ValueError):
    """Invalid parameter or configuration value."""

    exit_code = 2


class DataError(SpatialImlError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    """A mandatory column is missing from an input table."""


class IngestionError(DataError):
    pass


class NumericalError(SpatialImlError, ArithmeticError):
    """A numerical procedure could not produce a usable result."""

    exit_code = 4
