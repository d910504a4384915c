"""Exception hierarchy shared across the package."""


class B3Error(Exception):
    """Base class for every error raised by b3kit."""


class DimensionError(B3Error, ValueError):
    pass


class ShapeError(B3Error, ValueError):
    pass


class ParameterError(B3Error, ValueError):
    pass


class FormatError(B3Error, ValueError):
    pass


class ArityError(B3Error, ValueError):
    pass


class StateError(B3Error, RuntimeError):
    pass


class DegenerateInputError(B3Error, ValueError):
    pass


class LabelError(B3Error, ValueError):
    pass


class InputError(B3Error, ValueError):
    pass


class TrainingError(B3Error, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(B3Error, ValueError):
    pass


class ParseError(B3Error, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
