"""Exception types shared across the package."""


class RevoiceError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RevoiceError, ValueError):
    """An operation received data that violates its preconditions."""


class ConfigError(RevoiceError, ValueError):
    """A configuration object is internally inconsistent or out of range."""


class FilterDesignError(RevoiceError, ValueError):
    """Requested FIR specs cannot be met; carries the achievable attenuation."""

    def __init__(self, message, achievable_db=None):
        super().__init__(message)
        self.achievable_db = achievable_db


class InvalidAssetError(RevoiceError, ValueError):
    """A noise/RIR asset is unusable (e.g. silent or empty)."""


class InvalidRecipeError(RevoiceError, ValueError):
    """A degradation recipe violates its invariants."""


class AssetResolutionError(RevoiceError, KeyError):
    """A recipe references an asset that the store cannot resolve."""


class NumericDivergenceError(RevoiceError, RuntimeError):
    """Sampling produced a non-finite state; carries the offending step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointMismatchError(RevoiceError, RuntimeError):
    """A checkpoint's manifest does not match the requested configuration."""
