"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the domain an operation is defined on."""


class DataError(RuntimeError):
    """Malformed or inconsistent dataset on disk."""


class NumericalError(FloatingPointError):
    """A computation produced non-finite values it cannot recover from."""


class DegenerateWindowWarning(RuntimeWarning):
    """A window had no valid pixels after warping."""
