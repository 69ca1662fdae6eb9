"""Exception types shared across the package."""


class SmfeaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SmfeaError, ValueError):
    """A config value or combination of values is invalid."""


class InputError(SmfeaError, ValueError):
    """Caller-supplied data violates an operation's precondition."""


class ShapeError(SmfeaError, ValueError):
    """Tensor or matrix shape does not match the operation's contract."""


class NumericError(SmfeaError, ArithmeticError):
    """Non-finite or degenerate values where finite ones are required."""


class FeatureFormatError(SmfeaError, ValueError):
    """Malformed region-feature file; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(SmfeaError, ValueError):
    """Malformed manifest; message names the offending line or sample."""


class CheckpointError(SmfeaError, RuntimeError):
    """Checkpoint cannot be loaded or is incompatible with the config."""


class TrainingDiverged(SmfeaError, RuntimeError):
    """Training produced a non-finite loss term."""
