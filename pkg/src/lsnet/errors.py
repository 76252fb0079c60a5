"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class ContractError(ValueError):
    """An input does not match the shape or range an operation requires."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
