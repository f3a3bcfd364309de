"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CtxAugError(Exception):
    """Base class for all package errors."""


class ConfigError(CtxAugError):
    """Invalid configuration, profile, or invariant violation at load time."""


class TransportError(CtxAugError):
    """Remote endpoint unreachable or returned a non-success status."""


class EmptyGenerationError(CtxAugError):
    """Backend returned no text for a generation request."""


class AlignmentError(CtxAugError):
    """A target span could not be aligned with token boundaries."""

    def __init__(self, message: str, boundary: int | None = None):
        super().__init__(message)
        self.boundary = boundary


class CapabilityError(CtxAugError):
    """The backend lacks a capability the request depends on."""


class PartialOutputError(CtxAugError):
    """Generation failed part-way; ``completed`` holds the finished subset."""

    def __init__(self, message: str, completed: list):
        super().__init__(message)
        self.completed = completed


class ManifestMismatchError(CtxAugError):
    """A score cache was produced under a different model, profile, or flags."""


class EmptyAggregationError(CtxAugError):
    """No eligible cells remained for an aggregation."""


class SizingError(CtxAugError):
    """Too few units to compute the requested statistic."""


class DegenerateStatisticError(CtxAugError):
    """A test statistic is undefined (e.g. zero variance in both groups)."""


class RankDeficiencyError(CtxAugError):
    """The fixed-effects design matrix is not of full column rank."""

    def __init__(self, message: str, collinear: list[str]):
        super().__init__(message)
        self.collinear = collinear


class ConvergenceError(CtxAugError):
    """An optimizer failed to meet its convergence criteria."""

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


class PhaseError(CtxAugError):
    """Wraps a module error with the pipeline phase it surfaced in."""

    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause
