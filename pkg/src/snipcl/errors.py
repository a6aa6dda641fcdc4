"""Exception types shared across the package."""


class SnipclError(Exception):
    """Base class for all package errors."""


class ShapeError(SnipclError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(SnipclError, ValueError):
    """A configuration value is out of its valid range."""


class DegenerateError(SnipclError, ValueError):
    """A vector that must be normalized has (near) zero norm."""


class ContractError(SnipclError, ValueError):
    """A caller violated an operation's precondition."""


class FormatError(SnipclError, ValueError):
    """An on-disk file is corrupted or inconsistent with its manifest."""


class TrainingError(SnipclError, RuntimeError):
    """Training diverged (non-finite loss)."""
