"""Exception types raised across the package."""


class ForecastError(Exception):
    """Base class for every error raised by stgforecast."""


# --- data -----------------------------------------------------------------

class DataError(ForecastError, ValueError):
    pass


class MalformedHeader(DataError):
    def __init__(self, message, column=None):
        self.column = column
        super().__init__(message)


class RaggedRow(DataError):
    def __init__(self, row, expected, got):
        self.row = row
        super().__init__(f"row {row}: expected {expected} cells, got {got}")


class NonMonotonicDates(DataError):
    def __init__(self, row, message=None):
        self.row = row
        super().__init__(message or f"row {row}: date does not increase")


class IrregularDates(DataError):
    def __init__(self, row, message=None):
        self.row = row
        super().__init__(message or f"row {row}: uneven timestamp spacing")


class NegativeValue(DataError):
    def __init__(self, row, column, value=None):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: invalid value {value!r} "
                         "(expected a finite nonnegative number)")


class InvalidSpec(DataError):
    pass


class WindowTooLong(DataError):
    pass


# --- numerics -------------------------------------------------------------

class LengthMismatch(ForecastError, ValueError):
    pass


class ShapeMismatch(ForecastError, ValueError):
    pass


class NonFiniteState(ForecastError, FloatingPointError):
    pass


class NonFiniteActivation(ForecastError, FloatingPointError):
    pass


class DivergenceDetected(ForecastError, FloatingPointError):
    pass


class SeriesTooShort(ForecastError, ValueError):
    pass


class ConstantSeries(ForecastError, ValueError):
    pass


class ZeroActual(ForecastError, ZeroDivisionError):
    pass


class ZeroBaseline(ForecastError, ZeroDivisionError):
    pass


class SeasonTooLong(ForecastError, ValueError):
    pass


# --- persistence / orchestration ------------------------------------------

class CheckpointError(ForecastError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


class ConfigError(ForecastError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class DirectoryLocked(ForecastError):
    pass
