"""Exception hierarchy shared across the package."""


class ClusterTrialError(Exception):
    """Base class for all package errors."""


class ValidationError(ClusterTrialError):
    """Input data failed validation.

    ``line`` is the 1-based line of the offending record in the source file
    (header is line 1) when known, ``column`` the column name when known.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column '{column}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class MissingColumn(ValidationError):
    pass


class MissingValue(ValidationError):
    pass


class NonConstantWithinCluster(ValidationError):
    pass


class EmptyArm(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DomainError(ClusterTrialError, ValueError):
    """An effect measure or its gradient was requested outside its domain."""


class LevelUnavailable(ClusterTrialError):
    """The individual-average estimand cannot be identified without N."""


class SingularMatrix(ClusterTrialError, ArithmeticError):
    pass


class RankDeficientDesign(ClusterTrialError):
    pass


class NonConvergence(ClusterTrialError):
    """An iterative fit did not converge; ``stage`` names the fit."""

    def __init__(self, message, stage=None):
        self.stage = stage
        super().__init__(message)


class SeparationSuspected(NonConvergence):
    pass


class NonFiniteEvaluation(ClusterTrialError, ArithmeticError):
    pass


class ArmTooSmall(ClusterTrialError):
    pass


class EmptyTrainingArm(ClusterTrialError):
    pass


class TooManyFailures(ClusterTrialError):
    pass
