"""Exception types raised across the package."""


class LeapError(Exception):
    pass


class ShapeError(LeapError, ValueError):
    """Operand shapes do not agree."""


class DegenerateInputError(LeapError, ValueError):
    """Input has no usable content (zero-norm vector, empty mask, ...)."""


class ContractError(LeapError, ValueError):
    """A precondition of an operation was violated."""


class CorruptCheckpointError(LeapError):
    pass


class SchemaVersionError(LeapError):
    pass


class ConfigError(LeapError, KeyError):
    """Missing or invalid configuration key."""

    def __str__(self):
        return Exception.__str__(self)


class DivergenceError(LeapError, FloatingPointError):
    """Training produced a non-finite loss."""
