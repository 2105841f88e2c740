"""Exception hierarchy shared by every module of the package."""


class MemoryNetError(Exception):
    """Base class for all package errors."""


class DimensionError(MemoryNetError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MemoryNetError, ValueError):
    """A structural setting (kernel size, block size, extents) is invalid."""


class DegenerateInputError(MemoryNetError, ValueError):
    """An input row has (numerically) zero norm where a direction is needed."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class UsageError(MemoryNetError, ValueError):
    """An operation was called outside its contract."""


class DeterminismError(MemoryNetError, RuntimeError):
    """A function expected to be deterministic returned differing values."""


class GenerationError(MemoryNetError, ValueError):
    """A synthetic degradation could not be generated from the given geometry."""


class ParseError(MemoryNetError, ValueError):
    """A file could not be decoded; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(MemoryNetError, ValueError):
    """A checkpoint is from another format version or does not match a config."""
