"""Exception hierarchy shared by all mct modules."""

from __future__ import annotations

__all__ = ["MctError", "DomainError", "ContractError", "CapacityError", "FormatError"]


class MctError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(MctError, ValueError):
    """A value is outside the mathematical domain of an operation."""


class ContractError(MctError, ValueError):
    """A caller violated an interface precondition."""


class CapacityError(MctError, ValueError):
    """A data source cannot supply the requested sample sizes."""


class FormatError(MctError, ValueError):
    """A binary file does not conform to its on-disk format.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
