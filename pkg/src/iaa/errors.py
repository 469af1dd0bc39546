"""Exception hierarchy. The CLI maps each class to an exit code."""


class IAAError(Exception):
    exit_code = 1


class ConfigError(IAAError, ValueError):
    exit_code = 2


class DataError(IAAError, ValueError):
    exit_code = 3


class NumericalError(IAAError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
