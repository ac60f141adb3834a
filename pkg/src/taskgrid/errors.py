"""Exception types shared across the runtime."""


class TaskgridError(Exception):
    """Base class for all runtime errors."""


class ConfigError(TaskgridError):
    """Invalid configuration (grid/rank mismatch, non-divisible sizes, ...)."""


class ContractViolation(TaskgridError):
    """An internal invariant was broken; indicates a bug in the caller."""


class ProtocolError(TaskgridError):
    """Messaging-layer violation: bad checksum, unexpected message, remote write."""


class PoolError(TaskgridError):
    """Memory-pool misuse: duplicate version, unknown block, bypass conflict."""


class KernelError(TaskgridError):
    """A leaf kernel failed (e.g. non-SPD pivot); carries task identity."""
