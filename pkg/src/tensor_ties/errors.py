"""Exception hierarchy.

ValidationError and its subclasses cover everything detectable before tensor
math begins (bad flags, malformed archives, schema mismatches, non-finite
inputs); the CLI maps them to exit code 2. Anything else is a runtime
failure (exit code 1).
"""


class TensorTiesError(Exception):
    """Base class for all package errors."""


class ValidationError(TensorTiesError):
    """Input problem detectable before any tensor math runs."""


class FormatError(ValidationError):
    """Malformed or inconsistent checkpoint archive."""


class SchemaMismatchError(ValidationError):
    """Tensor names/shapes/dtype classes disagree between inputs."""


class NonFiniteInputError(ValidationError):
    """NaN or infinity in an input tensor that a merge operation consumes."""


class InvalidConfigError(ValidationError):
    """Out-of-range or contradictory configuration value."""


class DtypeOverflowError(TensorTiesError):
    """Value does not fit the requested output dtype (runtime, not validation)."""


class ComputeError(TensorTiesError):
    """Numerical failure produced during the merge math itself."""
