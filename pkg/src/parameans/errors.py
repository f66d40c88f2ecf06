"""Exception types shared across the package."""


class ParameansError(Exception):
    """Base class for package-specific failures."""


class ConfigError(ParameansError):
    """A run configuration is malformed or inconsistent."""


class SchemaError(ParameansError):
    """A data file does not have the expected columns or grids."""


class DomainTruncationError(ParameansError):
    """An integrand has not decayed at the edge of its sampled domain."""


class GridResolutionError(ParameansError):
    """A sample grid is too coarse for the requested interpolation."""


class QuadratureError(ParameansError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class SeriesTruncationError(ParameansError):
    """A series did not meet its stopping rule within the term budget."""


class ContourTruncationError(ParameansError):
    """An inversion contour tail exceeds the certified threshold."""


class RangeOverflowError(ParameansError):
    """A result exceeds the range of double precision."""
