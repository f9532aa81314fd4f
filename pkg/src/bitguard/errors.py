"""Exception types shared across the package."""


class BitguardError(Exception):
    """Base class for all package-specific errors."""


class InputError(BitguardError, ValueError):
    """An argument is out of range, mis-shaped, or otherwise invalid."""


class FormatError(BitguardError, ValueError):
    """Serialized data (codeword, checkpoint, IDX file) is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(BitguardError, ArithmeticError):
    """A non-finite value appeared during inference."""

    def __init__(self, message: str, layer: str | None = None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)
        self.layer = layer


class ConfigError(BitguardError, ValueError):
    """A configuration value is invalid or a budget is infeasible."""


class PlanError(BitguardError, ValueError):
    """A protection or locking plan is internally inconsistent."""
