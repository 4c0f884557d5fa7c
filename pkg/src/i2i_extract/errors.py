"""Exception hierarchy shared by every module of the package."""


class I2ITError(Exception):
    """Base class for all package errors."""


class DimensionError(I2ITError, ValueError):
    """Raised when tensor shapes disagree. ``axis`` names the offending axis."""

    def __init__(self, message: str, axis: str | int | None = None):
        if axis is not None:
            message = f"{message} (axis: {axis})"
        super().__init__(message)
        self.axis = axis


class ConfigurationError(I2ITError, ValueError):
    """Invalid option, hyperparameter or op kind."""


class ContractError(I2ITError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class FormatError(I2ITError):
    """Malformed tensor blob or manifest on disk."""

    def __init__(self, message: str, field: str | None = None, offset: int | None = None):
        parts = [message]
        if field is not None:
            parts.append(f"field={field}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(", ".join(parts))
        self.field = field
        self.offset = offset


class BudgetError(I2ITError):
    """The victim oracle has no queries left."""

    def __init__(self, used: int, budget: int, requested: int = 1):
        super().__init__(
            f"query budget exhausted: used={used} budget={budget} requested={requested}"
        )
        self.used = used
        self.budget = budget
        self.requested = requested


class TrainingDivergenceError(I2ITError, FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, step: int, group: str, arm: str | None = None,
                 seed: int | None = None, value: float | None = None):
        where = f"step={step} group={group}"
        if arm is not None:
            where += f" arm={arm}"
        if seed is not None:
            where += f" seed={seed}"
        super().__init__(f"training diverged ({where}, loss={value})")
        self.step = step
        self.group = group
        self.arm = arm
        self.seed = seed
        self.value = value


class VictimTrainingError(I2ITError):
    """Victim did not reach its loss threshold; carries the loss curve."""

    def __init__(self, message: str, curve: list[float]):
        super().__init__(message)
        self.curve = curve


class SampleSizeError(I2ITError, ValueError):
    """Too few samples for a statistic."""
