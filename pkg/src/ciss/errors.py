"""Exception types shared across the package."""


class CissError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(CissError):
    """A file or payload does not conform to its declared format."""


class ValidationError(CissError):
    """Inputs violate a documented precondition or invariant."""
