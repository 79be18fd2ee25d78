"""Interpretable spatial modelling of area-level health outcomes.

Knockoff filtering, Rashomon-ensemble variable importance, penalized-spline
GAMs with spatial tensor smooths, MGWR and distance-weighted local GAMs.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError, SpatialImlError  # noqa: E402

__all__ = ["__version__", "ConfigError", "DataError", "NumericalError", "SpatialImlError"]
