"""Exception hierarchy shared by every nbf_lab module.

``NumericalError`` and ``DataError`` subclasses map to CLI exit code 2,
``UsageError`` to exit code 1.
"""


class NbfLabError(Exception):
    pass


class UsageError(NbfLabError, ValueError):
    """Bad arguments or configuration."""


class InputShapeError(UsageError):
    pass


class NumericalError(NbfLabError, ArithmeticError):
    """A computation produced a non-finite or non-physical value."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """Raised by the FV solver; carries the partial residual history."""

    def __init__(self, message, iteration=None, cell=None, history=None):
        super().__init__(message, index=cell)
        self.iteration = iteration
        self.cell = cell
        self.history = history


class DataError(NbfLabError):
    """Missing, inconsistent or malformed data artifacts."""


class FormatError(DataError):
    pass


class DomainError(NumericalError):
    """An input outside the domain of a metric, e.g. a zero reference norm."""


class AccelerationError(NumericalError):
    """A warm-start comparison run diverged; ``report`` holds what finished."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
