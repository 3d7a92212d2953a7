"""Commuting-zone delineation, agency-overlap instruments and ARDL estimation."""

from .errors import NumericalError, RankDeficiencyError, ValidationError, ZoneforgeError

__version__ = "0.1.0"

__all__ = ["NumericalError", "RankDeficiencyError", "ValidationError", "ZoneforgeError", "__version__"]
