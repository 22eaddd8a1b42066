"""Exception types shared across the package."""


class TailguardError(Exception):
    pass


class DataError(TailguardError):
    """Problems with input data or on-disk artifacts (CLI exit code 2)."""


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyError(DataError):
    pass


class SplitError(DataError):
    pass


class WindowError(DataError):
    pass


class NumericalError(TailguardError):
    """Numerical failures (CLI exit code 3)."""


class NonFiniteError(NumericalError):
    pass


class ShapeError(TailguardError, ValueError):
    pass


class ZeroWeightError(NumericalError, ValueError):
    pass


class DegenerateStatsError(NumericalError, ValueError):
    pass


class QuadratureError(NumericalError):
    pass


class OverflowGuard(NumericalError, OverflowError):
    pass


class DomainError(TailguardError, ValueError):
    pass
