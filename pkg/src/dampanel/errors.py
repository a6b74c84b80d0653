"""Exception hierarchy.

Two families matter to callers: :class:`DataError` (bad input, bad config,
violated preconditions) and :class:`NumericalError` (a well-posed problem the
numerics could not finish). The CLI maps them to exit codes 2 and 3.
"""


class DamError(Exception):
    """Base class for every error raised by this package."""

    def details(self):
        return {}


class DataError(DamError, ValueError):
    pass


class NumericalError(DamError, RuntimeError):
    pass


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column

    def details(self):
        return {"row": self.row, "column": self.column}


class MissingCellError(DataError):
    def __init__(self, unit, time, column):
        super().__init__(f"missing value for unit={unit!r}, time={time!r}, column={column!r}")
        self.unit = unit
        self.time = time
        self.column = column

    def details(self):
        return {"unit": self.unit, "time": self.time, "column": self.column}


class DomainError(DataError):
    pass


class InsufficientHistoryError(DataError):
    pass


class PositivityError(DataError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time

    def details(self):
        return {"time": self.time}


class InconsistentMomentsError(DataError):
    pass


class SpecMismatchError(DataError):
    pass


class EstimationError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations

    def details(self):
        last = None if self.last_iterate is None else [float(v) for v in self.last_iterate]
        return {"last_iterate": last, "iterations": self.iterations}


class RankError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)

    def details(self):
        return {"columns": list(self.columns)}


class SingularityError(NumericalError):
    pass


class MixingError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def details(self):
        return {"diagnostics": self.diagnostics}


class EmptyEstimandError(DataError):
    pass
