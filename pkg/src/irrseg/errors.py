"""Shared exception types."""


class IrrsegError(Exception):
    """Base class for all package errors."""


class ShapeError(IrrsegError):
    """Tensor or raster dimensions do not satisfy an operation's contract."""


class FileFormatError(IrrsegError):
    """Base class for binary container errors."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FileFormatError):
    """File carries an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """File ended before the declared payload was read."""


class ConfigMismatchError(IrrsegError):
    """Stored parameters are inconsistent with the model configuration."""

    def __init__(self, field: str, expected, found):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"config mismatch on '{field}': expected {expected}, found {found}")
