class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A non-finite value appeared during training (CLI exit code 3)."""
