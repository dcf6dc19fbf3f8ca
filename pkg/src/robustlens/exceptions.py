"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """The gradient tape is in a state that does not allow the requested call."""


class ConfigError(ValueError):
    """A configuration value is missing, inconsistent or out of range."""


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values.

    Attributes:
        last_good: the last parameter store whose loss was finite, if any.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
