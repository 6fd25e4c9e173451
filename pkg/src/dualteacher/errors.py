"""Exception hierarchy shared by every module."""


class DualTeacherError(Exception):
    """Base class for all package errors."""


class ShapeError(DualTeacherError, ValueError):
    pass


class DegenerateFeatureError(DualTeacherError, ArithmeticError):
    """Raw encoder output too close to zero to normalize."""


class InvalidTemperatureError(DualTeacherError, ValueError):
    pass


class InvalidParameterError(DualTeacherError, ValueError):
    pass


class EmptyInputError(DualTeacherError, ValueError):
    pass


class NumericError(DualTeacherError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(DualTeacherError, ValueError):
    """Feature file header does not match the expected layout."""


class TruncationError(FormatError):
    pass


class UndefinedMetricError(DualTeacherError, ValueError):
    pass


class ConfigError(DualTeacherError, ValueError):
    """Invalid experiment configuration; message names the offending field."""


class DivergenceError(DualTeacherError, ArithmeticError):
    def __init__(self, message, *, stage=None, step=None, sequence=None):
        super().__init__(message)
        self.stage = stage
        self.step = step
        self.sequence = sequence

    def __reduce__(self):
        # keep stage/step/sequence when raised inside a worker process
        return (_rebuild_divergence, (self.args[0], self.stage, self.step, self.sequence))


def _rebuild_divergence(message, stage, step, sequence):
    return DivergenceError(message, stage=stage, step=step, sequence=sequence)
