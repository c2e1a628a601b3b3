"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """A numerical operation failed (non-finite value, diverging update, ...)."""


class NotPositiveDefiniteError(NumericalError):
    """A matrix that must be positive definite is not, even after jitter."""


class ValidationError(ValueError):
    """Invalid user input (file schema, config value, ...)."""
