"""Exception hierarchy shared across the package."""


class FedWeITError(Exception):
    pass


class DimensionError(FedWeITError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(FedWeITError, ValueError):
    """An input value or configuration field is out of range."""


class StateError(FedWeITError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class ProtocolError(FedWeITError, RuntimeError):
    """The client/server protocol was violated."""


class UsageError(FedWeITError, RuntimeError):
    pass


class NumericError(FedWeITError, ArithmeticError):
    pass
