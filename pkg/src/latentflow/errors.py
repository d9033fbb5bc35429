"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class InputError(ValueError):
    """User-supplied data (tokens, specs, files) is invalid."""


class NonFiniteError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class TrainingDiverged(RuntimeError):
    """Training aborted because the loss became non-finite."""


class ConfigError(ValueError):
    """A run configuration failed validation (unknown key, bad value)."""
