"""Exception types shared across the package."""


class FabCorrectError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(FabCorrectError, ValueError):
    """Tensor or raster shapes are incompatible with an operation."""


class ContractError(FabCorrectError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(FabCorrectError, FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


class CheckpointFormatError(FabCorrectError):
    """A checkpoint file is malformed or does not match the requested model."""


class FormatError(FabCorrectError, ValueError):
    """An image file uses an unsupported encoding."""


class LayoutRangeError(FabCorrectError, ValueError):
    """Layout geometry does not fit the stream format's integer ranges."""


class GdsError(FabCorrectError, ValueError):
    """A GDSII stream could not be read; ``offset`` locates the bad record."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class GdsParseError(GdsError):
    """Malformed stream: truncated, odd-length or out-of-order records."""


class UnsupportedElementError(GdsError):
    """The stream uses an element outside the supported flat subset."""
