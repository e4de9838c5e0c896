"""Exception types raised across the package."""


class SplatRigError(Exception):
    """Base class for all package errors."""


class ValidationError(SplatRigError, ValueError):
    """Input data violates a documented invariant."""


class DegenerateFace(ValidationError):
    pass


class NearSingular(SplatRigError, ArithmeticError):
    pass


class ParallelBisectors(ValidationError):
    pass


class DegenerateAxis(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NoForwardCache(SplatRigError, RuntimeError):
    pass


class ShapeMismatch(ValidationError):
    pass


class UnassignedFace(ValidationError):
    pass


class EmptyPart(ValidationError):
    pass


class TooFewParts(ValidationError):
    pass


class AlreadyRan(SplatRigError, RuntimeError):
    pass


class NonFiniteLoss(SplatRigError, ArithmeticError):
    pass


class BadCheckpoint(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SampledAtKink(SplatRigError, RuntimeError):
    pass
