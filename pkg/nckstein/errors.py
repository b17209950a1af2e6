"""Exception hierarchy shared by every nckstein module."""

from __future__ import annotations


class NckSteinError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(NckSteinError, ValueError):
    """Array shapes do not chain or do not match the model dimension."""


class DegenerateInputError(NckSteinError, ValueError):
    """Input is finite-valued in type but meaningless, e.g. a zero median."""


class NonFiniteError(NckSteinError, FloatingPointError):
    """A NaN or infinity was produced or supplied.

    ``index``, ``level`` and ``step`` locate the offending particle or
    iteration when they are known.
    """

    def __init__(
        self,
        message: str,
        *,
        index: int | None = None,
        level: int | None = None,
        step: int | None = None,
    ) -> None:
        self.detail = message
        self.index = index
        self.level = level
        self.step = step
        context = [
            f"{name}={value}"
            for name, value in (("index", index), ("level", level), ("step", step))
            if value is not None
        ]
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)


class DivergenceError(NonFiniteError):
    """Particle norms exceeded the divergence guard."""


class TrainingError(NckSteinError):
    """Optimisation of a network failed, e.g. on a non-finite loss."""

    def __init__(self, message: str, *, step: int | None = None) -> None:
        self.step = step
        if step is not None:
            message = f"{message} (step={step})"
        super().__init__(message)


class ConfigError(NckSteinError):
    """A configuration references something that cannot be resolved."""


class OutputExistsError(NckSteinError):
    """The output directory already holds artifacts and overwrite is off."""
