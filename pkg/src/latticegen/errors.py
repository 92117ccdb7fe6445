"""Exception types shared across the package."""


class LatticeGenError(Exception):
    pass


class ShapeError(LatticeGenError, ValueError):
    """Array dimensions do not line up."""


class NumericError(LatticeGenError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(LatticeGenError, ValueError):
    """Invalid or inconsistent configuration."""


class DomainError(LatticeGenError, ValueError):
    """Argument outside the domain of a mapping (e.g. a probability of exactly 0)."""


class FormatError(LatticeGenError, ValueError):
    """Binary file with an unexpected magic number or version."""


class LengthError(FormatError):
    """Binary file shorter than its header promises."""


class CapacityError(LatticeGenError, ValueError):
    """Problem too large for the requested method."""
