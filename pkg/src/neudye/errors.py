"""Exception types shared across the package.

ValidationError covers malformed inputs (bad JSON, inconsistent grid data,
unknown channel names).  NumericalError covers runtime numerical failure
(singular network matrix, Newton divergence, unstable integration).  The CLI
maps ValidationError to exit code 1 and NumericalError to exit code 2.
"""


class ValidationError(ValueError):
    """Raised when input data violates a documented contract."""


class NumericalError(RuntimeError):
    """Raised when a numerical procedure fails to converge or is singular."""
