class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""
