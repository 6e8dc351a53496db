"""
Exceptions raised by dwstrack.

All exceptions derive from `DwstrackError` and from the builtin exception a caller would
naturally expect, so `except ValueError` keeps working.
"""
__all__ = [
    'DwstrackError', 'DimensionError', 'ConfigurationError', 'InputTooShortError',
    'StateError', 'ParseError', 'ValidationError', 'CheckpointVersionError',
    'NumericError', 'EvaluationError']


class DwstrackError(Exception):
    pass


class DimensionError(DwstrackError, ValueError):
    pass


class ConfigurationError(DwstrackError, ValueError):
    pass


class InputTooShortError(DimensionError):
    def __init__(self, length, minimum, what='input'):
        self.length = length
        self.minimum = minimum
        super().__init__(
            '{0} too short: length {1} < minimum length {2}'.format(what, length, minimum))


class StateError(DwstrackError, RuntimeError):
    pass


class ParseError(DwstrackError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ''
        if path is not None:
            loc = '{0}'.format(path)
        if line is not None:
            loc += '{0}line {1}'.format(':' if loc else '', line)
        super().__init__('{0}: {1}'.format(loc, message) if loc else message)


class ValidationError(DwstrackError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__('invalid {0}: {1}'.format(field, message))


class CheckpointVersionError(DwstrackError, ValueError):
    pass


class NumericError(DwstrackError, ArithmeticError):
    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)


class EvaluationError(DwstrackError, ValueError):
    pass
