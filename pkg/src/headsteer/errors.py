"""Exception hierarchy shared across the package."""

from __future__ import annotations


class HeadSteerError(Exception):
    """Base class for every error raised by headsteer."""


class DomainError(HeadSteerError, ValueError):
    """Input outside an operation's mathematical domain (shape mismatch, NaN, ...)."""


class ContractError(HeadSteerError, ValueError):
    """A documented precondition or structural contract was violated."""


class NumericFault(HeadSteerError, FloatingPointError):
    """NaN/Inf appeared during a computation.

    ``locus`` names where it was first seen, e.g. ``"layer2.head1"`` or
    ``"traj 3, t 17"``.
    """

    def __init__(self, message: str, locus: str | None = None):
        self.locus = locus
        if locus:
            message = f"{message} (at {locus})"
        super().__init__(message)


class GenerationError(HeadSteerError):
    """The scripted expert could not produce a successful demonstration."""


class StoreError(HeadSteerError):
    """Base class for file-format errors."""


class BadMagicError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


class TruncatedFileError(StoreError):
    pass
