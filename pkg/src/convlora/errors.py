"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid model, adapter or run configuration."""


class DataError(ValueError):
    """Input data violates an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DegenerateGateError(ValueError):
    """Every entry along a softmax axis is -inf."""


class OracleError(RuntimeError):
    """A finite-difference oracle was asked to check a non-deterministic function."""


class CheckpointError(ValueError):
    """A checkpoint manifest does not match the model it is loaded into."""
