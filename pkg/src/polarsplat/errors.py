"""Exception types raised across the package."""


class PolarSplatError(Exception):
    """Base class for all package errors."""


class DimensionError(PolarSplatError, ValueError):
    """Array shapes or sizes do not agree."""


class DataError(PolarSplatError, ValueError):
    """Input samples are not usable (NaN, negative intensity, ...)."""


class DomainError(PolarSplatError, ValueError):
    """Argument outside the domain of the operation."""


class BehindCameraError(DomainError):
    """A point lies on or behind the camera plane."""


class FormatError(PolarSplatError, ValueError):
    """A file on disk is malformed or truncated."""


class ConfigError(PolarSplatError, ValueError):
    """Invalid configuration."""


class InitializationError(PolarSplatError, RuntimeError):
    """Hypothesis initialization has nothing to start from."""


class CorrectionUnavailableError(PolarSplatError, RuntimeError):
    """Photometric correction cannot run (no donor pixels)."""


class NumericalError(PolarSplatError, RuntimeError):
    """A numerical stage produced an unusable result."""
