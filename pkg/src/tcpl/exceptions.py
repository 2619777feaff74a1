"""Exception hierarchy shared by every module."""


class TCPLError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(TCPLError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DatasetError(TCPLError):
    pass


class ShapeError(TCPLError, ValueError):
    pass


class LossError(TCPLError, ArithmeticError):
    """A loss could not be evaluated (empty batch, non-finite value)."""

    def __init__(self, message, component=None, breakdown=None):
        self.component = component
        self.breakdown = breakdown
        super().__init__(message)


class ContractError(TCPLError):
    """An operation was called outside its precondition."""
