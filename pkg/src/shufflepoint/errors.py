"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A layer or model configuration violates its invariants."""


class InputError(ValueError):
    """Input data is outside the accepted domain (labels, counts, ...)."""


class VerificationError(RuntimeError):
    """A correctness check (gradient check, oracle agreement) failed."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
