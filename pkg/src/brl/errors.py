"""Exception hierarchy.

Two families matter to callers: ``ValidationError`` (bad input, exit status 2
on the command line) and ``NumericalError`` (a computation broke down, exit
status 3).
"""


class BrlError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(BrlError, ValueError):
    """Input violates a documented precondition."""


class NumericalError(BrlError, ArithmeticError):
    """A numerical procedure failed or left its domain of validity."""


# validation family
class InvalidGeometryError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class NonUnitCovectorError(ValidationError):
    pass


class ImmediateExitError(ValidationError):
    pass


class SymmetryError(ValidationError):
    pass


class PositivityError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class NoDataError(ValidationError):
    pass


class ZeroAmplitudeError(ValidationError):
    pass


class ResolutionError(ValidationError):
    pass


class EmptyMaskError(ValidationError):
    pass


# numerical family
class DegenerateMetricError(NumericalError):
    pass


class DegenerateBoundaryError(NumericalError):
    pass


class OutOfChartError(NumericalError):
    pass


class TrappedRayError(NumericalError):
    pass


class TangentialRayError(NumericalError):
    pass


class CoverageError(NumericalError):
    pass


class PolarCoordinatesError(NumericalError):
    pass


class RiccatiBreakdownError(NumericalError):
    pass


class ReflectionMatchingError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    """Iteration cap reached; ``best`` holds the last estimate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
