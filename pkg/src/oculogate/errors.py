"""Exception taxonomy shared across the package.

ConfigError maps to CLI exit code 2, everything else to exit code 1.
"""


class ConfigError(ValueError):
    """Invalid configuration or usage: bad key, bad value, missing setting."""


class DataError(ValueError):
    """Malformed or inconsistent data (parse/format/ingest failures)."""


class SchemaError(DataError):
    """Data does not match the expected schema (wrong columns, dims, counts)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""
