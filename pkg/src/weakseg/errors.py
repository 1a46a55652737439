"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor or map shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class ConfigurationError(ValueError):
    """Raised for invalid model, dataset, split or experiment configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""
