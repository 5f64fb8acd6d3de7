"""Exception hierarchy shared by every fedcausal module."""


class FedCausalError(Exception):
    """Base class for all package errors."""


class NumericError(FedCausalError):
    pass


class ValidationError(FedCausalError):
    pass


class NotPositiveDefinite(NumericError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidDegreesOfFreedom(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NonFiniteParameters(NumericError):
    pass


class WorkerFailure(FedCausalError):
    """A source worker failed mid-round; the round is aborted."""


class MissingReport(ValidationError):
    pass


class RoundMismatch(ValidationError):
    pass


class EmptyDraws(ValidationError):
    pass


class EmptyKey(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class NonBinaryTreatment(SchemaError):
    pass


class ShapeMismatch(ValidationError):
    pass


class MissingTruth(ValidationError):
    pass


class IoError(FedCausalError, OSError):
    pass
