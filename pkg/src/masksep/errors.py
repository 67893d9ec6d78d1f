"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a documented invariant."""


class NonFiniteGradientError(RuntimeError):
    """An optimizer step received NaN/inf gradients; the step was aborted."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or reward; the run was aborted."""
