"""Exception types shared across the package."""


class FadingnetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FadingnetError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(FadingnetError, ValueError):
    """Value outside an operation's mathematical domain."""


class ContractError(FadingnetError, ValueError):
    """A documented precondition was violated."""


class ConfigError(FadingnetError, ValueError):
    """Invalid configuration value or schema."""


class DataError(FadingnetError, ValueError):
    """Dataset too short or otherwise unusable."""


class NumericError(FadingnetError, RuntimeError):
    """A numerical routine failed, e.g. Cholesky on a non-PD matrix."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class InstabilityError(FadingnetError, RuntimeError):
    """A simulated trajectory blew up."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(FadingnetError, RuntimeError):
    """Training produced a non-finite loss term."""

    def __init__(self, message, epoch=None, term=None):
        super().__init__(message)
        self.epoch = epoch
        self.term = term
