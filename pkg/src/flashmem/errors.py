"""Exception hierarchy shared by every flashmem module."""


class FlashMemError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FlashMemError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FlashMemError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(FlashMemError, ValueError):
    """A configuration value is invalid or missing."""


class CapacityError(FlashMemError, ValueError):
    """A sequence would exceed the model's position capacity."""


class FormatError(FlashMemError, ValueError):
    """A serialized file is malformed."""


class NonFiniteError(FlashMemError, FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class FrozenParameterError(FlashMemError, RuntimeError):
    """A frozen parameter received a nonzero gradient."""
