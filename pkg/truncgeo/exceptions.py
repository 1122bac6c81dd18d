class TruncGeoError(Exception):
    """Base class for errors raised by truncgeo."""


class ConfigError(TruncGeoError, ValueError):
    pass


class DomainError(TruncGeoError, ValueError):
    pass


class NormalizationError(TruncGeoError):
    pass


class QuadratureError(TruncGeoError):
    """Adaptive quadrature hit its subdivision limit.

    The best estimate and its error are kept so callers can decide
    whether the result is still usable.
    """

    def __init__(self, message, estimate=None, error=None):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class GeometryError(TruncGeoError):
    pass


class UnsupportedModelError(TruncGeoError):
    pass


class InversionError(TruncGeoError):
    pass


class DegenerateFitError(TruncGeoError):
    pass


class PosteriorError(TruncGeoError):
    pass


class StreamlineError(TruncGeoError):
    pass
