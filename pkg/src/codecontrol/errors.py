"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """An integration or filter update left the admissible numerical range."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class ConvergenceWarning(UserWarning):
    """A long-run average did not settle within the requested window."""
