"""Exception types shared across the toolkit."""


class LabError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LabError):
    """Configuration rejected; carries the offending key path."""

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class NonFiniteError(LabError):
    """A coefficient or state evaluation produced NaN/inf."""


class StabilityError(LabError):
    """A stability condition (CFL bound, Picard contraction) is violated."""
