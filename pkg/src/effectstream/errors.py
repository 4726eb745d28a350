"""Exception types shared across the package."""

from __future__ import annotations


class EffectStreamError(Exception):
    """Base class for package-specific failures."""


class DimensionMismatchError(EffectStreamError, ValueError):
    """Input shape incompatible with a network or operation."""


class NotPositiveDefiniteError(EffectStreamError, ValueError):
    """A constructed correlation matrix is not positive definite."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(f"{message} (smallest eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


class CorrelationBudgetError(EffectStreamError, ValueError):
    """Requested inter-type correlation breaks positive definiteness."""

    def __init__(self, requested: float, max_level: float):
        super().__init__(
            f"inter-type correlation {requested} exceeds the admissible "
            f"maximum {max_level:.6f}"
        )
        self.requested = requested
        self.max_level = max_level


class DegeneratePropensityError(EffectStreamError, ValueError):
    """Propensity construction hit a (near) constant treatment score."""


class GroupImbalanceError(EffectStreamError, ValueError):
    """A batch or dataset lacks treated or control units; caller should re-draw."""


class EmptyMemoryError(EffectStreamError, ValueError):
    """Rehearsal memory required but empty; use the baseline path instead."""


class DivergenceError(EffectStreamError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, loss_history: list[float]):
        super().__init__(message)
        self.epoch = epoch
        self.loss_history = loss_history


class OracleFailureError(EffectStreamError, RuntimeError):
    """A test oracle (finite differences, enumeration) could not be evaluated."""


class ConfigError(EffectStreamError, ValueError):
    """Invalid experiment configuration; message carries the field path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class GradientError(EffectStreamError, RuntimeError):
    """Non-finite gradient encountered during an optimizer update."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient for parameter '{param_name}'")
        self.param_name = param_name
