"""Exception hierarchy shared by every stage of the pipeline."""


class EClipError(Exception):
    pass


class DimensionError(EClipError, ValueError):
    """Operand shapes do not conform."""


class NumericError(EClipError, ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class ParameterError(EClipError, ValueError):
    pass


class RangeError(ParameterError, IndexError):
    pass


class CapacityError(EClipError, ValueError):
    """Not enough items to satisfy a request (batch larger than dataset, empty pool)."""


class DegenerateError(EClipError, ValueError):
    """Input is structurally valid but degenerate: empty sequence, zero vector, tiny image."""


class ConfigError(EClipError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
