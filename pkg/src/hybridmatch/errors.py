"""Exception types raised across the package."""


class HybridMatchError(Exception):
    """Base class for all package errors."""


class InvalidGeometryError(HybridMatchError, ValueError):
    """Box coordinates are non-finite or violate the box invariants."""


class DegenerateGeometryError(HybridMatchError, ValueError):
    """A union or enclosing area is zero, so the ratio is undefined."""


class InvalidCostError(HybridMatchError, ValueError):
    """Cost matrix has non-finite entries or an empty dimension."""


class OracleTooLargeError(HybridMatchError, ValueError):
    """Brute-force enumeration was asked to solve too large an instance."""


class CapacityError(HybridMatchError, ValueError):
    """Fewer queries than (repeated) targets; matching cannot cover every target."""


class ConfigError(HybridMatchError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class DivergenceError(HybridMatchError, RuntimeError):
    """Training produced a non-finite loss."""
