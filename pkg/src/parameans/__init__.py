"""Exterior extension of circular-mean data given on a parabola.

Given averages of an unknown compactly supported function over circles
centered on a parabola, the package extends that data to circles centered
anywhere outside the parabola.  The route is spectral: a product expansion
of the K0 kernel in parabolic coordinates turns the data into coefficient
profiles in a frequency variable, an exterior field is synthesized from
those profiles, and a contour integral against the reciprocal gamma
function undoes the K0 averaging at each exterior center.
"""

from .errors import (
    ParameansError, ConfigError, SchemaError, DomainTruncationError,
    GridResolutionError, QuadratureError, SeriesTruncationError,
    ContourTruncationError, RangeOverflowError,
)
from .geometry import (
    ParabolicPoint, Parabola, to_cartesian, from_cartesian, distance,
    jacobian, is_interior,
)
from .pipeline import (
    GridSpec, RunConfig, VerifyReport, default_config, load_config,
    save_config, run_simulate, run_extract, run_verify, compare,
)

__all__ = [
    "ParameansError", "ConfigError", "SchemaError", "DomainTruncationError",
    "GridResolutionError", "QuadratureError", "SeriesTruncationError",
    "ContourTruncationError", "RangeOverflowError",
    "ParabolicPoint", "Parabola", "to_cartesian", "from_cartesian",
    "distance", "jacobian", "is_interior",
    "GridSpec", "RunConfig", "VerifyReport", "default_config", "load_config",
    "save_config", "run_simulate", "run_extract", "run_verify", "compare",
]

__version__ = "0.1.0"
