"""Gated dual-stream screening pipeline: synthetic cohorts, multi-task
training, uncertainty-aware rejection, and per-group threshold calibration."""

from .errors import ConfigError, DataError, NumericError, SchemaError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericError", "SchemaError", "__version__"]
