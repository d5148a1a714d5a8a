"""Exception hierarchy shared by every module."""


class MemRehearseError(Exception):
    pass


class ConfigurationError(MemRehearseError, ValueError):
    pass


class InputError(MemRehearseError, ValueError):
    pass


class ShapeError(MemRehearseError, ValueError):
    pass


class FormatError(MemRehearseError, ValueError):
    pass


class NumericError(MemRehearseError, ArithmeticError):
    pass


class StateError(MemRehearseError, RuntimeError):
    pass


class RunError(MemRehearseError, RuntimeError):
    """Raised when one unit of a larger run (e.g. a subset training) fails."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
