"""Exception hierarchy shared by the whole package.

The CLI maps ValidationError/ParameterError to exit code 2 and
SingularityError (numerical failure) to exit code 3.
"""


class GevpgpError(Exception):
    """Base class for all package errors."""


class ParameterError(GevpgpError, ValueError):
    """A parameter lies outside its mathematical domain."""


class SingularityError(GevpgpError):
    """A covariance matrix could not be factorized within the jitter budget."""


class ValidationError(GevpgpError, ValueError):
    """Inconsistent or malformed user-facing input (data, config, formulas)."""
