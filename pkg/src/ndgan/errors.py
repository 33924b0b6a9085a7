"""Exception types shared across the toolkit."""


class NdganError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(NdganError):
    """A spec, config file, or argument combination is invalid."""


class InputError(NdganError, ValueError):
    """Runtime data handed to an operation violates its contract."""


class NumericError(NdganError):
    """A computation produced non-finite or otherwise unusable values."""


class InfeasibleError(NdganError):
    """A requested target cannot be met under the stated constraints."""
