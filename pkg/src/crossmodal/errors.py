"""Exception hierarchy shared by every module."""


class CrossModalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CrossModalError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class InputError(CrossModalError, ValueError):
    """Input data is empty, too short, or otherwise unusable."""


class FormatError(InputError):
    """A file on disk does not follow the expected format."""


class ComponentError(CrossModalError, ValueError):
    """More canonical components were requested than are available."""


class ConfigError(CrossModalError, ValueError):
    """A configuration value or key is invalid."""


class UsageError(CrossModalError, RuntimeError):
    """An API was called in the wrong order (e.g. backward before forward)."""


class NumericalError(CrossModalError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


class SingularityError(NumericalError):
    """A matrix expected to be positive definite is (numerically) singular."""


class DegenerateBatchError(NumericalError):
    """A batch has too few samples to estimate covariances."""


class DivergenceError(NumericalError):
    """Training produced a non-finite objective or gradient."""
