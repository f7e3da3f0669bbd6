"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the classes below rather than raising bare ValueError.
"""


class FiqnnError(Exception):
    """Base class for all package errors."""


class DimensionError(FiqnnError):
    """Operand shapes do not satisfy an operation's preconditions."""


class RangeError(FiqnnError):
    """An integer code lies outside its declared bit-width range."""


class ConfigError(FiqnnError):
    """Invalid configuration value or unknown configuration key."""


class StateError(FiqnnError):
    """Operation invoked on an object in the wrong lifecycle state."""


class NumericError(FiqnnError):
    """Non-finite value produced where the contract requires finite results."""


class TrainingError(FiqnnError):
    """Training diverged. Carries the epoch at which the loss left the reals."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class StageError(FiqnnError):
    """A distillation stage failed. Carries the offending layer index."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class AccumulatorOverflowError(FiqnnError):
    """Integer accumulation could exceed the 64-bit budget."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class FormatError(FiqnnError):
    """Malformed model or dataset file. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class VerificationError(FiqnnError):
    """An equivalence or audit check failed."""
