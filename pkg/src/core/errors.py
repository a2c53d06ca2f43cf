# src/core/errors.py

class FastVsrError(ValueError):
    """Base class for every error raised by the core modules."""


class DimensionError(FastVsrError):
    """A tensor axis has the wrong size. The message names the axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigError(FastVsrError):
    pass


class ContractError(FastVsrError):
    pass


class InputSizeError(FastVsrError):
    """Spatial dims are not divisible by the required stride."""

    def __init__(self, message, padding_hint=None):
        super().__init__(message)
        self.padding_hint = padding_hint


class RankError(FastVsrError):
    pass


class ContainerError(FastVsrError):
    """A tensor container could not be parsed. `offset` is the byte position of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ImageFormatError(FastVsrError):
    pass


class NonFiniteLossError(FastVsrError):
    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown or {}
