"""Exception types shared across the engine."""


class LifelongError(Exception):
    """Base class for all engine errors."""


class TopologyError(LifelongError, ValueError):
    """Shapes or wiring of the network are inconsistent with a request."""


class UnknownTaskError(LifelongError, KeyError):
    """A task, head or column id was not found."""


class DataError(LifelongError, ValueError):
    """Malformed or empty data (bad labels, empty sets)."""


class StateError(LifelongError, RuntimeError):
    """Operation invoked on an object in the wrong state (stale trace, untrained task)."""


class NumericalError(LifelongError, ArithmeticError):
    """A parameter update produced a non-finite value."""

    def __init__(self, message, param_id=None):
        super().__init__(message)
        self.param_id = param_id


class ConfigError(LifelongError, ValueError):
    """Invalid configuration value."""


class CapacityError(LifelongError, RuntimeError):
    """Expansion would exceed the configured maximum width."""


class ConstraintError(LifelongError, RuntimeError):
    """A requested edit violates a structural or accuracy constraint."""
