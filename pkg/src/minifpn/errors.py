"""Exception hierarchy shared by the engine, model, and CLI layers."""


class ShapeError(ValueError):
    """Tensor shapes or dimensions violate an operation's contract."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class NumericsError(ArithmeticError):
    """A computation produced non-finite values."""


class CheckpointMismatchError(ConfigError):
    """A checkpoint's parameter names or shapes do not match the model."""
