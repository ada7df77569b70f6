"""Exception hierarchy shared across the package.

DataError covers malformed or inconsistent inputs (files, manifests,
cohorts); NumericalError covers non-finite values and diverging
computations. The CLI maps these onto distinct exit codes.
"""


class DataError(ValueError):
    """Input data is malformed, inconsistent, or unusable."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable numbers."""
