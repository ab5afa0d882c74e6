"""Exception hierarchy shared across the toolkit."""


class ColCombineError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ColCombineError):
    """Invalid parameters or command-line configuration."""


class DataFormatError(ColCombineError):
    """Unreadable, truncated, or corrupt input file."""


class GroupingError(ColCombineError):
    """Malformed column set or column grouping."""


class IntegrityError(ColCombineError):
    """Packed-matrix integrity violation (e.g. two survivors in one cell)."""


class NetworkError(ColCombineError):
    """Network definition violates a structural invariant."""


class SimulationError(ColCombineError):
    """Systolic-array configuration or wiring error."""


class PipelineError(SimulationError):
    """Cross-layer pipelining cannot be scheduled as requested."""


class StagnationError(ColCombineError):
    """Pruning loop made no progress while above its nonzero target."""


class DivergenceError(ColCombineError):
    """Training loss became non-finite."""
