"""
Exception hierarchy for SpotIQ.
Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class SpotIQError(Exception):
    """Base class for all SpotIQ errors."""

    exit_code: int = 3


class ConfigurationError(SpotIQError):
    """Invalid configuration, specification or input shape."""

    exit_code = 2

    def __init__(self, message: str, fields: Optional[list[str]] = None):
        self.fields = fields or []
        super().__init__(message)


class SpotIQRuntimeError(SpotIQError):
    """Failure while running a valid configuration."""

    exit_code = 3


class NumericalError(SpotIQRuntimeError):
    """A loss or score became non-finite."""

    def __init__(self, message: str, batch_id: Optional[int] = None, dump_path: Optional[str] = None):
        self.batch_id = batch_id
        self.dump_path = dump_path
        super().__init__(message)


class EvaluationError(SpotIQRuntimeError):
    """Metrics cannot be computed for the given predictions and spec."""


class DatasetError(SpotIQRuntimeError):
    """Dataset directory missing or unreadable."""


class CheckpointError(SpotIQRuntimeError):
    """Checkpoint missing, corrupt or incompatible."""
