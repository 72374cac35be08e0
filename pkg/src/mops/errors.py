"""Exception types shared across the package."""

from __future__ import annotations


class MopsError(Exception):
    """Base class for all package errors."""


class InvalidArgument(MopsError, ValueError):
    pass


class NumericFailure(MopsError, ArithmeticError):
    """Raised when a computation produces or consumes non-finite values."""

    def __init__(self, message: str, round_index: int | None = None):
        if round_index is not None:
            message = f"{message} (round {round_index})"
        super().__init__(message)
        self.round_index = round_index


class ContractViolation(MopsError, RuntimeError):
    pass


class BarrierViolation(ContractViolation):
    """A controller round was fed records that do not belong to it."""


class ProtocolError(MopsError, ValueError):
    pass


class ChannelClosed(MopsError, ConnectionError):
    pass
