"""Exception hierarchy.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` and
subclasses -> 2, ``InvariantError`` -> 3.
"""


class SelinferError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SelinferError):
    pass


class ParameterError(SelinferError, ValueError):
    pass


class DataError(SelinferError):
    pass


class SchemaError(DataError):
    pass


class FormatError(DataError):
    pass


class FieldRangeError(DataError, IndexError):
    pass


class IncompatibleSketchError(DataError):
    pass


class CoverageError(DataError):
    pass


class DegenerateCalibrationError(DataError):
    pass


class MetricError(DataError):
    pass


class DriftError(DataError):
    pass


class DivergenceError(SelinferError):
    def __init__(self, batch_index, loss):
        super().__init__(f"non-finite training loss {loss!r} at batch {batch_index}")
        self.batch_index = batch_index
        self.loss = loss


class FrozenModelError(SelinferError):
    pass


class InvariantError(SelinferError):
    pass
