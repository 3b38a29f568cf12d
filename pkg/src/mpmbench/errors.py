"""Exception types shared across the engine and the benchmark harness."""


class SimulationError(Exception):
    """Base class for all engine errors."""


class RejectedInputError(SimulationError, ValueError):
    """An argument failed a precondition (non-finite, nonpositive, ...)."""


class SpatialDomainError(SimulationError, ValueError):
    """A coordinate left the encodable domain or underflowed a block margin."""


class ResourceError(SimulationError, RuntimeError):
    """Allocation or capacity failure; message carries the requested size."""


class ContractViolationError(SimulationError, RuntimeError):
    """An internal invariant that callers must uphold was broken."""


class ModeConflictError(SimulationError, RuntimeError):
    """An operation is not allowed in the current pipeline mode."""


class DegenerateStateError(SimulationError, ValueError):
    """A particle reached a physically invalid state (e.g. J <= 0)."""


class ConfigError(SimulationError, ValueError):
    """A run configuration is inconsistent or out of range."""


class BarrierTimeoutError(SimulationError, RuntimeError):
    """A worker did not reach the synchronization point within the watchdog."""
