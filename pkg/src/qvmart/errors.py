"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """A run configuration is internally inconsistent or unsupported."""


class ContractViolation(ValueError):
    """An input breaks a documented precondition of an operation."""
