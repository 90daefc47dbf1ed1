"""Exception hierarchy shared across the package."""


class VqdmError(Exception):
    """Base class for all package errors."""


class DimensionError(VqdmError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(VqdmError):
    """Invalid configuration value or unsatisfiable layer constraint."""


class UsageError(VqdmError):
    """An API or CLI contract was violated by the caller."""


class EncodingError(VqdmError):
    """A code index does not fit the configured bit width."""


class FormatError(VqdmError):
    """Malformed container bytes. Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(VqdmError):
    """A non-finite value appeared where the algorithm requires finite math."""

    def __init__(self, message: str, layer: str | None = None):
        if layer is not None:
            message = f"{message} [layer: {layer}]"
        super().__init__(message)
        self.layer = layer
