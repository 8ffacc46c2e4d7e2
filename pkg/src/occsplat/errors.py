"""Exception types shared across the package."""


class OccSplatError(Exception):
    """Base class for all package errors."""

    code = "error"


class InvalidInput(OccSplatError, ValueError):
    """An argument violates an operation precondition."""

    code = "invalid_input"


class InvalidState(OccSplatError, RuntimeError):
    """Internal data violates an invariant (e.g. non-finite parameters)."""

    code = "invalid_state"


class TransportError(OccSplatError, RuntimeError):
    """A remote backend was unreachable; safe to retry."""

    code = "transport"


class ProtocolError(OccSplatError, RuntimeError):
    """A remote backend answered with a malformed or unexpected payload."""

    code = "protocol"


class DataError(OccSplatError, RuntimeError):
    """A dataset or checkpoint on disk is missing or corrupt."""

    code = "data"
