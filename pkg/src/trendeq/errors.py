"""Exception hierarchy shared across the package."""


class TrendeqError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(TrendeqError, ValueError):
    """Invalid input data or configuration (bad schema, unbalanced panel, bad grid...)."""


class NumericalError(TrendeqError, ArithmeticError):
    """A numerical procedure failed (bracket expansion, non-monotone search...)."""


class RankError(NumericalError):
    """A design matrix is rank deficient, so the requested fit is not identified."""
