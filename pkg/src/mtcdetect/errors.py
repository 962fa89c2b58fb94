"""Exception hierarchy shared by every module in the package."""


class MTCError(Exception):
    """Base class for all errors raised by mtcdetect."""


class DimensionError(MTCError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(MTCError, ValueError):
    """An argument is outside its documented domain."""


class NumericError(MTCError, ArithmeticError):
    """A computation produced or received non-finite values, or a factorization failed."""


class ContractError(MTCError, RuntimeError):
    """An API was used in a way its contract forbids (e.g. backward on a non-scalar)."""


class StateError(MTCError, RuntimeError):
    """An object is not in the state required by the operation."""


class UndefinedMetricError(MTCError, ValueError):
    """A detection metric has a zero denominator."""


class FormatError(MTCError, ValueError):
    """A file does not follow the expected binary/text layout."""


class TrainingAborted(NumericError):
    """Training hit a non-finite loss.

    ``epoch``, ``step`` and ``step_seed`` identify the batch that failed so it
    can be regenerated in isolation.
    """

    def __init__(self, message, epoch=None, step=None, step_seed=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.step_seed = step_seed
