"""Exception types shared across the package."""


class RostError(ValueError):
    """Invalid input or precondition violation."""


class StructuralError(RostError):
    """A matrix does not have the structure an operation requires."""


class QuadratureError(RostError):
    """A Gaussian integral failed to converge (or diverges)."""
