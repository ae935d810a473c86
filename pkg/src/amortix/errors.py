"""Shared exception types."""


class DimensionError(ValueError):
    """Array shapes do not line up with the model or mask they feed."""


class NonFiniteGradientError(RuntimeError):
    """A gradient contained NaN/Inf; the offending step was not applied."""


class EstimatorError(RuntimeError):
    """A stochastic gradient estimate could not be formed (non-finite h)."""


class FormatError(ValueError):
    """A serialized artifact (IDX, AMX1, AMSK, config) failed validation."""
