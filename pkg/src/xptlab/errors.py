"""Exception hierarchy shared by every xptlab module."""

from __future__ import annotations


class XptlabError(Exception):
    """Base class for all library errors."""


class InputError(XptlabError, ValueError):
    """Bad user-supplied data: unknown language, overlong sequence, empty split..."""


class ContractError(XptlabError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes do not line up."""


class InvariantError(XptlabError, RuntimeError):
    """An internal invariant was breached (e.g. frozen backbone changed)."""


class CheckpointError(XptlabError, OSError):
    """Base class for checkpoint container failures."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
