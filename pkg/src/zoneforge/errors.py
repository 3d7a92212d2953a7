"""Exception hierarchy shared by all modules.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class ZoneforgeError(Exception):
    """Base class for all errors raised by zoneforge."""


class ValidationError(ZoneforgeError, ValueError):
    """Input data or configuration violates a documented contract."""


class NumericalError(ZoneforgeError, ArithmeticError):
    """A computation could not be carried out reliably."""


class RankDeficiencyError(NumericalError):
    """A design matrix does not have full column rank.

    Attributes
    ----------
    collinear : list of tuple
        ``(dependent_column, [columns it is a combination of])`` pairs.
    """

    def __init__(self, message, collinear=()):
        super().__init__(message)
        self.collinear = list(collinear)
