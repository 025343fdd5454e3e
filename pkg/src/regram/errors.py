"""Exception hierarchy shared by every regram module."""
from __future__ import annotations


class RegramError(Exception):
    """Base class; the CLI maps any subclass to exit code 2."""


class ParseError(RegramError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        super().__init__(message)
        self.line = line
        self.field = field


class SchemaError(RegramError):
    pass


class NormalizerError(RegramError):
    pass


class ContractError(RegramError):
    """A caller violated an operation's precondition."""


class ShapeError(RegramError):
    pass


class NonFiniteError(RegramError, FloatingPointError):
    pass


class SplitError(RegramError):
    pass


class TrainingError(RegramError):
    pass


class ModelFileError(RegramError):
    pass


class ChecksumError(ModelFileError):
    pass


class UnknownTargetError(RegramError):
    pass
