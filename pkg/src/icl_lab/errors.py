"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Shapes or dimensions are inconsistent (e.g. more features than dimensions)."""


class EnumerationTooLarge(RuntimeError):
    """Exact enumeration of count vectors exceeds the configured budget.

    Callers should switch to the Monte Carlo or truncated estimator.
    """


class MissingTaskError(ValueError):
    """A prompt has no task vector where one is required."""


class InvalidPromptError(ValueError):
    """A prompt or count vector cannot produce attention scores."""


class NumericError(ArithmeticError):
    """Non-finite logits or weights."""


class RegimeMismatch(ValueError):
    """A regime-specific routine was given a distribution of another regime."""
