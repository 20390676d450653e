"""Exception hierarchy shared by all modules.

``DataError`` maps to CLI exit status 2 and ``NumericalError`` to 3.
"""


class TMOError(Exception):
    """Base class for errors raised by this package."""

    module = "tmo"

    def __init__(self, message, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class DataError(TMOError):
    """Input data is malformed, incomplete or inconsistent with the schema."""


class NumericalError(TMOError):
    """A computation failed numerically (rank deficiency, factorization, ...)."""
