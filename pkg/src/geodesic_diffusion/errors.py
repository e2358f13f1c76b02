"""Exception hierarchy shared by every module."""


class GeodesicDiffusionError(Exception):
    """Base class for all library errors."""


class ConfigError(GeodesicDiffusionError, ValueError):
    """Bad user-supplied configuration (unknown keys, invalid values)."""


class InvalidBoundary(ConfigError):
    pass


class DegenerateAlpha(ConfigError):
    """alpha0 == alpha1 within tolerance; use the exponential schedule instead."""


class OutOfRange(ConfigError):
    pass


class InvalidSigma(ConfigError):
    pass


class EndpointMismatch(ConfigError):
    """Two paths were compared whose endpoints differ."""


class LengthMismatch(ConfigError):
    pass


class MissingCondition(ConfigError):
    pass


class NumericalError(GeodesicDiffusionError, ArithmeticError):
    """A computation produced NaN or infinity."""


class NonFiniteLoss(NumericalError):
    def __init__(self, iteration, value):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class CorruptFile(GeodesicDiffusionError, OSError):
    """A file exists but does not parse as the expected format."""
