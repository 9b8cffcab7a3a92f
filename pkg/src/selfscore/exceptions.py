"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with an operator or type."""


class FormatError(ValueError):
    """A tensor, weights, mask, or config file is malformed."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to reach its tolerance."""
