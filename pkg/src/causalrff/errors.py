"""Exception hierarchy."""


class CausalRFFError(Exception):
    """Base class for all package errors."""


class ParameterError(CausalRFFError, ValueError):
    """Invalid hyperparameter or argument value."""


class ShapeError(CausalRFFError, ValueError):
    """Array dimensions do not match."""


class DomainError(CausalRFFError, ValueError):
    """A value lies outside its admissible range."""


class NumericalError(CausalRFFError, FloatingPointError):
    """Non-finite value produced during a computation."""


class StateError(CausalRFFError, RuntimeError):
    """Object is not in a usable state (e.g. NaN model)."""


class ProtocolError(CausalRFFError, RuntimeError):
    """Federation protocol violation."""


class RoundAbortError(ProtocolError):
    """A synchronous round could not complete."""


class ResyncRequest(ProtocolError):
    """A source received a stale broadcast and needs the current model."""


class IngestionError(CausalRFFError, ValueError):
    """Malformed input file."""
