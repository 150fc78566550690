"""Exception hierarchy shared across the package."""


class ACPError(Exception):
    """Base class for all package errors."""


class ValidationError(ACPError, ValueError):
    """Input data or configuration violates a contract."""


class MissingOutcomeOnLabeled(ValidationError):
    pass


class OutcomePresentOnUnlabeled(ValidationError):
    pass


class RaggedCovariates(ValidationError):
    pass


class EmptyStratum(ValidationError):
    pass


class KTooLarge(ValidationError):
    pass


class KTooSmall(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class MissingACP(ValidationError):
    pass


class ScenarioMismatch(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class SolverError(ACPError, RuntimeError):
    """Numerical failure while solving or inverting."""


class NoConvergence(SolverError):
    pass


class SingularJacobian(SolverError):
    pass


class SingularMatrix(SolverError):
    pass


class SingularDesign(SolverError):
    pass


class NegativeVariance(SolverError):
    pass
