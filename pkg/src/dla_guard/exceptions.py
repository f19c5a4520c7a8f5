"""Custom exceptions for dla-guard."""

from __future__ import annotations


class DLAGuardError(Exception):
    """Base exception for dla-guard."""


class DimensionError(DLAGuardError):
    """Raised when tensor shapes do not fit an operation."""


class InputError(DLAGuardError):
    """Raised when an argument value is invalid."""


class BindingError(InputError):
    """Raised when artifacts are bound to different target models."""

    def __init__(self, message: str, expected_id: str = "", actual_id: str = "") -> None:
        super().__init__(message)
        self.expected_id = expected_id
        self.actual_id = actual_id


class FormatError(DLAGuardError):
    """Raised when a file on disk is malformed."""


class TrainingError(DLAGuardError):
    """Raised when training diverges."""

    def __init__(self, message: str, epoch: int = -1) -> None:
        super().__init__(message)
        self.epoch = epoch


class NumericError(DLAGuardError):
    """Raised when an operation produces NaN or Inf values."""


class LockError(DLAGuardError):
    """Raised when another command holds the artifact directory."""
