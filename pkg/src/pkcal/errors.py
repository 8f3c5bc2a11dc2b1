"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
to a stable category without inspecting messages.
"""


class PkcalError(Exception):
    exit_code = 1
    category = "error"


class ValidationError(PkcalError, ValueError):
    exit_code = 2
    category = "validation"


class ResourceError(ValidationError):
    category = "resource"


class DataError(PkcalError):
    exit_code = 3
    category = "data"


class NumericError(PkcalError, ArithmeticError):
    exit_code = 4
    category = "numeric"


class IllConditionedError(NumericError):
    """Factorization failed even after the maximum jitter."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DegenerateError(NumericError):
    category = "degenerate"


class SingularityError(NumericError):
    category = "singular"


class OptimizationError(PkcalError):
    exit_code = 5
    category = "optimization"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class MixingError(OptimizationError):
    category = "mixing"


class TransportError(PkcalError):
    exit_code = 6
    category = "transport"


class ProtocolError(TransportError):
    category = "protocol"


class ProcessError(TransportError):
    category = "process"


class ExternalModelError(TransportError):
    category = "external-model"


class OracleError(OptimizationError):
    """A reference value could not be computed to its stated tolerance."""

    category = "oracle"


class StudyError(OptimizationError):
    """Too many replications of a study failed."""

    category = "study"
