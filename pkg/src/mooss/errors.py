"""Exception types shared across the package."""


class MoossError(Exception):
    """Base class."""


class ConfigError(MoossError, ValueError):
    """Invalid configuration or incompatible shapes."""


class UsageError(MoossError, ValueError):
    """A call violated an operation's preconditions."""


class NonFiniteError(MoossError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""
