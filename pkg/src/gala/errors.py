"""Exception types shared across the package."""


class GalaError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GalaError, ValueError):
    """A spec, config file, or argument is structurally invalid."""


class NumericsError(GalaError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingError(GalaError, RuntimeError):
    """Pretraining diverged or otherwise failed mid-run."""
