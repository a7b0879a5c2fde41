"""Exception hierarchy for dtnmt."""

# Import future modules
from __future__ import annotations

# Import built-in modules
from typing import Any
from typing import Dict
from typing import List
from typing import Optional


class DtnmtError(Exception):
    """Base class of every error raised by dtnmt."""


class ShapeError(DtnmtError, ValueError):
    """Operand shapes do not conform to a tensor primitive."""

    def __init__(self, primitive: str, *shapes: Any, detail: str = "") -> None:
        self.primitive = primitive
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{primitive}: incompatible shapes {rendered}" if shapes else f"{primitive}: invalid operand"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GradCheckError(DtnmtError, ArithmeticError):
    """A finite-difference check met a non-finite value."""

    def __init__(self, coordinate: Any, value: float) -> None:
        self.coordinate = coordinate
        self.value = value
        super().__init__(f"non-finite value {value!r} at coordinate {coordinate}")


class ConfigError(DtnmtError, ValueError):
    """Configuration failed validation.

    Attributes:
        errors: One human-readable line per problem found.
    """

    def __init__(self, errors: List[str]) -> None:
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


class VocabularyError(DtnmtError, KeyError):
    """A token or id lies outside the vocabulary."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class CorpusFormatError(DtnmtError, ValueError):
    """A corpus file line could not be parsed."""

    def __init__(self, path: str, line_number: int, reason: str) -> None:
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {reason}")


class ModelError(DtnmtError, ValueError):
    """Model inputs violate the model's contract."""


class DomainError(DtnmtError, ValueError):
    """A domain id is unknown or domain bookkeeping is inconsistent."""


class CheckpointError(DtnmtError, OSError):
    """A checkpoint could not be written or read."""


class TrainingError(DtnmtError, RuntimeError):
    """A training recipe was invoked with unusable inputs."""


class DivergenceError(TrainingError):
    """The training loss became non-finite.

    Attributes:
        report: Loss components of the step that diverged.
    """

    def __init__(self, step: int, report: Optional[Dict[str, float]] = None) -> None:
        self.step = step
        self.report = dict(report or {})
        parts = ", ".join(f"{k}={v}" for k, v in sorted(self.report.items()))
        super().__init__(f"loss diverged at step {step}: {parts}")


class EvaluationError(DtnmtError, ValueError):
    """Evaluation inputs are inconsistent."""
