"""Exception types shared across the toolkit."""


class BalancekitError(Exception):
    """Base class for all toolkit errors."""


class DataError(BalancekitError):
    """Malformed or contract-violating input data."""


class ConfigError(BalancekitError):
    """Invalid specification or configuration."""


class SingularSystemError(BalancekitError):
    """A linear system that must be solved exactly is singular."""
