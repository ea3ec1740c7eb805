"""Exception types raised across the package."""


class SymphonyError(Exception):
    """Base class for all package errors."""


class DimensionError(SymphonyError, ValueError):
    pass


class ArgumentError(SymphonyError, ValueError):
    pass


class FrozenError(SymphonyError, RuntimeError):
    """Raised when something tries to mutate a frozen adjacency."""


class NumericalError(SymphonyError, ArithmeticError):
    def __init__(self, message, matrix=None):
        super().__init__(message)
        self.matrix = matrix


class StateError(SymphonyError, RuntimeError):
    pass


class DivergenceError(SymphonyError, RuntimeError):
    """Training produced a non-finite loss; ``dump_path`` points at diagnostics."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
