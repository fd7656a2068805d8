"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class KpiForecastError(Exception):
    pass


class ConfigError(KpiForecastError, ValueError):
    pass


class DataError(KpiForecastError):
    pass


class MalformedJSON(DataError):
    def __init__(self, msg, byte_offset, line, column):
        super().__init__(f"{msg} (byte offset {byte_offset}, line {line}, column {column})")
        self.byte_offset = byte_offset
        self.line = line
        self.column = column


class DepthExceeded(DataError):
    pass


class EmptySeries(DataError):
    pass


class SplitError(DataError):
    pass


class FitError(DataError):
    pass


class WindowError(DataError):
    pass


class AlignmentError(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class NumericalError(KpiForecastError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    pass
