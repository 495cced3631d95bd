"""Exception types raised across the package."""


class MaskFuseError(ValueError):
    """Base class for validation errors (CLI exit code 1)."""


class OverlapError(MaskFuseError):
    pass


class BoundsError(MaskFuseError):
    pass


class DimensionMismatch(MaskFuseError):
    pass


class EmptyRegionError(MaskFuseError):
    pass


class LengthMismatch(MaskFuseError):
    pass


class InsufficientData(MaskFuseError):
    pass


class ThresholdTooLow(MaskFuseError):
    pass


class ConfigError(MaskFuseError):
    pass


class FormatError(MaskFuseError):
    """Malformed mask file (bad RLE, wrong bit depth, ...)."""
