"""
errors.py
---------
Exception hierarchy for the blind MIMO toolkit.

Every error raised on purpose by the core modules derives from
BlindMimoError, so the CLI can map them onto exit codes:
  - ConfigError          -> exit 1
  - any other subclass   -> exit 2
"""


class BlindMimoError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(BlindMimoError, ValueError):
    """Array dimensions do not line up."""


class DomainError(BlindMimoError, ValueError):
    """Argument lies outside the operation's domain."""


class NumericError(BlindMimoError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message: str, primitive: str = ""):
        super().__init__(message if not primitive else f"{message} (in {primitive})")
        self.message = message
        self.primitive = primitive

    def __reduce__(self):
        return type(self), (self.message, self.primitive)


class TrainingError(NumericError):
    """Training diverged; the loss trace up to the failure is attached."""

    def __init__(self, message: str, trace: list, primitive: str = "elbo_loss"):
        super().__init__(message, primitive)
        self.trace = list(trace)

    def __reduce__(self):
        return type(self), (self.message, self.trace, self.primitive)


class LinearAlgebraError(BlindMimoError, ArithmeticError):
    """Singular or badly conditioned linear system."""


class CapacityError(BlindMimoError, RuntimeError):
    """Exhaustive search would exceed the hypothesis guard."""


class ConfigError(BlindMimoError, ValueError):
    """Bad configuration key, value or name."""

    def __init__(self, message: str, path: str = "", line: int = 0):
        where = ""
        if path:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{where}{message}")
        self.message = message
        self.path = path
        self.line = line

    def __reduce__(self):
        return type(self), (self.message, self.path, self.line)


class OutputError(BlindMimoError, OSError):
    """Writing or reading a result file failed."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.message = message
        self.path = path

    def __reduce__(self):
        return type(self), (self.message, self.path)


class BlockError(BlindMimoError):
    """A single simulated block failed inside a grid point."""

    def __init__(self, block_index: int, estimator: str, cause: Exception):
        super().__init__(f"block {block_index} ({estimator}): {cause}")
        self.block_index = block_index
        self.estimator = estimator
        self.cause = cause

    def __reduce__(self):
        return type(self), (self.block_index, self.estimator, self.cause)
