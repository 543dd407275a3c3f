"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or incompatible."""


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numeric condition (e.g. a NaN loss)."""
