"""Exception types raised across the package."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class ConsistencyError(RuntimeError):
    """A computed quantity violates a structural property (e.g. negative premium)."""


class UnsupportedRegimeError(ValueError):
    """Pricing requested in an exercise regime the routine does not cover."""


class ComplexityError(RuntimeError):
    """Degenerate configuration, e.g. too many parameter sign changes."""


class GridError(ValueError):
    """Discretisation grid is unusable (too small, degenerate, not covering)."""


class ConfigError(ValueError):
    """Invalid run configuration."""
