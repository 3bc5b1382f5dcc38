"""Exception hierarchy.

Everything a caller might want to map to an exit code derives from either
``ValidationError`` (bad input, exit 1) or ``NumericError`` (exit 2).
"""


class ValidationError(ValueError):
    pass


class ShapeError(ValidationError):
    pass


class CapacityError(ValidationError):
    pass


class ModalityError(ValidationError):
    """A post lacks a modality that the fusion mode requires."""


class EmptyTextError(ValidationError):
    """Every token of a text was out of vocabulary."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ClassIndexError(ValidationError, IndexError):
    pass


class StateError(ValidationError):
    pass


class EvaluationError(ValidationError):
    pass


class NumericError(ArithmeticError):
    pass
