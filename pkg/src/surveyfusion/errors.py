"""Exception hierarchy shared across the engine.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` to exit code 3.
"""


class SurveyFusionError(Exception):
    pass


class ValidationError(SurveyFusionError, ValueError):
    pass


class SchemaError(ValidationError):
    pass


class MeshError(ValidationError):
    pass


class ProjectionError(ValidationError):
    pass


class NumericalError(SurveyFusionError, ArithmeticError):
    pass


class DefinitenessError(NumericalError):
    """Raised when a precision matrix fails Cholesky factorization."""


class ConvergenceError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class DegenerateSeriesError(NumericalError):
    pass
