"""Exception hierarchy shared across the toolkit."""


class NavError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(NavError):
    """Data violates a structural invariant (ordering, finiteness, norms)."""


class DataError(NavError):
    """Data is missing, malformed, or unusable for the requested operation."""


class ConfigError(NavError):
    """Configuration values are inconsistent or out of range."""


class NoTakeoffError(DataError):
    """No sustained motion was found; the log never leaves the ground."""


class EmptyBinError(DataError):
    """An averaging bin contains no inertial samples."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or incomplete."""


class TrainingDivergedError(NavError):
    """Loss became non-finite during optimization."""
