"""Exception hierarchy.

The CLI maps :class:`NumericalError` to exit status 1, :class:`UsageError`
to 2 and :class:`InputError` (unreadable or malformed data) to 3.
"""


class SmoothPSError(Exception):
    """Base class for all package errors."""


class InputError(SmoothPSError):
    pass


class NumericalError(SmoothPSError):
    pass


class MissingObservedOutcome(InputError):
    pass


class EmptyRespondents(InputError):
    pass


class NoCompleteCases(InputError):
    pass


class UsageError(SmoothPSError):
    pass


class UnknownFlag(UsageError):
    pass


class MissingRequired(UsageError):
    pass


class BadColumn(UsageError):
    """A configured column is absent from the input header."""


class IoError(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class NonNumeric(ParseError):
    def __init__(self, column, line):
        super().__init__(f"non-numeric value in column {column!r}", line)
        self.column = column


class RankDeficient(NumericalError):
    pass


class Infeasible(NumericalError):
    """Calibration targets lie outside the set attainable by positive weights."""

    def __init__(self, message="calibration targets are not attainable", pattern=None):
        if pattern is not None:
            message = f"pattern {pattern}: {message}"
        super().__init__(message)
        self.pattern = pattern


class SingularJacobian(NumericalError):
    pass


class MaxIterations(NumericalError):
    pass


class NoRoot(NumericalError):
    pass


class Separation(NumericalError):
    pass


class NonPositiveWeight(NumericalError):
    pass


class SingularTau(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class TooManyFailures(NumericalError):
    pass
