"""Exception hierarchy shared across the package."""


class DataError(Exception):
    """Base for dataset / file format problems (CLI exit code 2)."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    pass


class FormatError(DataError):
    pass


class NumericError(Exception):
    """Numerical failures (CLI exit code 3)."""


class FitError(NumericError):
    """Pose fitting failed (arity, degeneracy or divergence)."""


class InitError(NumericError):
    """Every robust-initialization hypothesis failed to fit."""
