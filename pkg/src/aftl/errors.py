"""Exception types shared across the package.

CLI exit codes: ConfigurationError -> 1, data errors (FormatError, missing
files) -> 2, NumericError -> 3.
"""


class ConfigurationError(ValueError):
    """Invalid configuration: incompatible layer specs, infeasible plans,
    bad schedule values."""


class ShapeError(ValueError):
    """Tensor shape mismatch. Carries the offending layer index when the
    mismatch happened inside a layer stack."""

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ProtocolError(RuntimeError):
    """Federation protocol violation: stale tapes, mismatched feedback,
    out-of-order or malformed message flow."""


class StragglerError(ProtocolError):
    """A client upload expected this round never arrived."""

    def __init__(self, client_ids):
        self.client_ids = sorted(client_ids)
        super().__init__(f"missing uploads from clients {self.client_ids}")


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required; the triggering
    operation was refused."""


class FormatError(ValueError):
    """Malformed binary input (IDX files, message records). Carries the byte
    offset of the first inconsistency."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
