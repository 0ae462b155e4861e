"""
Custom exceptions for the loopguard library.

This module provides the exception hierarchy raised by the ingestion,
memory management, storage and evaluation layers.
"""

from typing import Optional, Dict, Any


class LoopGuardError(Exception):
    """Base exception class for all loopguard errors."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        """
        Initialize the exception.

        Args:
            message: Human-readable error message
            details: Additional structured context
        """
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        if self.details:
            return f"{self.message} | Details: {self.details}"
        return self.message


class ConfigError(LoopGuardError):
    """
    Exception raised when a configuration value or file is invalid.

    Raised before any processing starts so a bad run never writes artifacts.
    """

    def __init__(self, message: str, field: Optional[str] = None, value: Optional[Any] = None):
        details = {}
        if field:
            details["field"] = field
        if value is not None:
            details["value"] = value
        super().__init__(message, details)
        self.field = field
        self.value = value


class StreamFormatError(LoopGuardError):
    """
    Exception raised when a descriptor stream file is malformed.

    The byte offset points at the first byte that could not be decoded.
    """

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        details: Dict[str, Any] = {}
        if offset is not None:
            details["offset"] = offset
        if path:
            details["path"] = path
        super().__init__(message, details)
        self.offset = offset
        self.path = path


class DimensionMismatchError(LoopGuardError):
    """Exception raised when a descriptor does not have the run's dimension."""

    def __init__(self, expected: int, actual: int, message: Optional[str] = None):
        super().__init__(
            message or f"Descriptor dimension {actual} does not match {expected}",
            {"expected": expected, "actual": actual},
        )
        self.expected = expected
        self.actual = actual


class ConsistencyError(LoopGuardError):
    """
    Exception raised when in-memory state is corrupted.

    Examples are a missing word reference, a location living in two
    tiers at once or an asymmetric neighbor link.
    """

    def __init__(self, message: str, invariant: Optional[str] = None, **context: Any):
        details = dict(context)
        if invariant:
            details["invariant"] = invariant
        super().__init__(message, details)
        self.invariant = invariant


class ContractError(ConsistencyError):
    """Exception raised when an operation is called with its precondition violated."""


class StoreError(LoopGuardError):
    """Base exception for long-term memory database errors."""


class StoreIOError(StoreError):
    """
    Exception raised when the long-term memory database cannot be read or written.

    Distinct from a missing record, which is reported as ``None``.
    """

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message, {"path": path} if path else None)
        self.path = path


class EvaluationError(LoopGuardError):
    """Exception raised when evaluation input is unusable."""
