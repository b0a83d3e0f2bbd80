"""Exception types shared across the package."""


class DaclError(Exception):
    """Base class for every error raised by dacl."""


class ShapeError(DaclError, ValueError):
    """Operand shapes do not conform for an operation."""


class ContractError(DaclError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(DaclError, ValueError):
    """A configuration value is out of its allowed range."""


class EmptyPoolError(DaclError, ValueError):
    """Neighbor search was asked to run against an empty pool."""


class UndefinedMetricError(DaclError, ValueError):
    """A metric is mathematically undefined for the given input."""


class GenerationError(DaclError, RuntimeError):
    """Procedural scene generation failed after bounded retries."""


class ConvergenceError(DaclError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class StageError(DaclError, RuntimeError):
    """A training-step stage failed; ``stage`` names which one."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
