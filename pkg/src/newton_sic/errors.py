"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end.
"""


class NewtonSicError(Exception):
    exit_code = 1


class ConstructionError(NewtonSicError):
    """A geometric object could not be built or failed its build-time checks."""

    exit_code = 1

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class DomainError(ConstructionError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class CoverError(ConstructionError):
    def __init__(self, message, cell=None):
        super().__init__(message, witness=cell)
        self.cell = cell


class CoverageError(NewtonSicError):
    """A query point is not covered by any elementary set."""

    exit_code = 2


class VerificationError(NewtonSicError):
    exit_code = 2


class DicViolation(VerificationError):
    def __init__(self, message, ray=None):
        super().__init__(message)
        self.ray = ray


class SceneError(VerificationError):
    pass


class GrazingError(NewtonSicError, ValueError):
    exit_code = 2


class NonRegularScattering(NewtonSicError):
    exit_code = 2

    def __init__(self, message, impacts=None):
        super().__init__(message)
        self.impacts = impacts


class QuadratureError(NewtonSicError):
    exit_code = 2

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class ResourceError(NewtonSicError):
    exit_code = 3

    def __init__(self, message, predicted=None):
        super().__init__(message)
        self.predicted = predicted


class ParseError(NewtonSicError):
    exit_code = 4


class ValidationError(NewtonSicError, ValueError):
    exit_code = 4

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
