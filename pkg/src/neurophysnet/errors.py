"""Exception hierarchy shared by every subpackage."""


class NeuroPhysError(Exception):
    """Base class for all errors raised by neurophysnet."""


class DimensionError(NeuroPhysError, ValueError):
    """Operand shapes are incompatible."""


class ShapeError(DimensionError):
    """A tensor has the wrong shape for a time-series operation."""


class ParameterError(NeuroPhysError, ValueError):
    """A scalar argument is out of its valid range."""


class ConfigurationError(NeuroPhysError, ValueError):
    """A configuration is internally inconsistent."""


class DataError(NeuroPhysError, ValueError):
    """Input data violates a contract (e.g. label out of range)."""


class UsageError(NeuroPhysError, RuntimeError):
    """An API was called in an invalid state."""


class DesignError(NeuroPhysError, ValueError):
    """A filter could not be designed as a stable cascade."""


class FormatError(NeuroPhysError, ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(NeuroPhysError, ArithmeticError):
    """A numeric process produced non-finite values."""

    def __init__(self, message: str, *, step: int | None = None,
                 epoch: int | None = None, batch: int | None = None):
        where = []
        if step is not None:
            where.append(f"step {step}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.step = step
        self.epoch = epoch
        self.batch = batch
