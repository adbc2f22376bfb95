"""Exception types raised across the package."""


class AATError(Exception):
    """Base class for all package errors."""


class ConfigError(AATError, ValueError):
    pass


class DomainError(AATError, ValueError):
    pass


class ShapeError(AATError, ValueError):
    pass


class LengthError(ShapeError):
    pass


class DataError(AATError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CapabilityError(AATError, RuntimeError):
    """A policy was asked for access it does not grant (e.g. gradients in black-box mode)."""


class DependencyError(AATError, FileNotFoundError):
    """An upstream artifact required by a pipeline stage is missing."""


class TrainingFailure(AATError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
