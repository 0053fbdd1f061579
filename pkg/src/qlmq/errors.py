"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DegenerateTensorError(ValueError):
    """A tensor is unusable for the requested operation (e.g. all-zero weights)."""


class DegenerateRepresentationError(ValueError):
    """A representation vector has zero norm and cannot be cosine-normalized."""


class UninitializedRangeError(RuntimeError):
    """An activation range was queried before any calibration batch."""


class EncodingError(ValueError):
    """A level code does not fit the declared bit-width."""


class AbortedStepError(RuntimeError):
    """A forward operation produced NaN/Inf; the step must be discarded."""

    def __init__(self, op_kind: str, message: str = ""):
        self.op_kind = op_kind
        super().__init__(message or f"non-finite values produced by op '{op_kind}'")


class AbortedRunError(RuntimeError):
    """Training diverged; carries the step index at which it happened."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training aborted at step {step}")


class IntegrityError(RuntimeError):
    """Checkpoint payload failed its CRC check."""


class VersionError(RuntimeError):
    """Checkpoint format version is not supported."""


class CompatibilityError(RuntimeError):
    """Checkpoint does not match the supplied model configuration."""
