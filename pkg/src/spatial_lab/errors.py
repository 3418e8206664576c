"""Exception types shared across the lab."""

from __future__ import annotations


class ShapeError(ValueError):
    """Array dimensions do not chain or match."""


class DomainError(ValueError):
    """An argument lies outside the operation's domain."""


class NonFiniteError(FloatingPointError):
    """A loss, gradient or state became NaN or infinite."""


class UnsatisfiableError(RuntimeError):
    """Rejection sampling found no scene satisfying every relation."""


class GenerationError(RuntimeError):
    """Prompt or pair generation ran out of its attempt budget."""


class PerturbationError(RuntimeError):
    """No jointly satisfiable perturbation was found within budget."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; carries the last good state."""

    def __init__(self, message: str, last_good=None, step: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
