"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class SilifError(Exception):
    """Base class for all errors raised by this package."""


class ParameterRangeError(SilifError, ValueError):
    """An interval or hyperparameter lies outside its admissible range."""


class NumericError(SilifError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class SingularTransitionError(NumericError):
    """ZOH discretization of a zero continuous-time eigenvalue."""


class ShapeError(SilifError, ValueError):
    pass


class DataError(SilifError, ValueError):
    pass


class TapeReuseError(SilifError, RuntimeError):
    pass


class FormatError(SilifError, ValueError):
    """Malformed binary container. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(SilifError, ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where += f" [key '{key}'"
            where += f", line {line}]" if line is not None else "]"
        super().__init__(message + where)
        self.key = key
        self.line = line
