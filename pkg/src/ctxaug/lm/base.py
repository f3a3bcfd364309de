"""Backend-neutral types and the interface every LM backend implements."""

from __future__ import annotations

import abc
import dataclasses
import math
from dataclasses import dataclass

from ..errors import ConfigError, EmptyGenerationError


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.8
    top_k: int = 50
    do_sample: bool = True
    seed: int = 0
    max_tokens: int = 64

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")

    def with_seed(self, seed: int) -> "GenerationParams":
        return dataclasses.replace(self, seed=seed)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class BackendCapabilities:
    supports_mask: bool
    mask_token: str | None
    supports_bidirectional_scoring: bool
    model_identifier: str

    def __post_init__(self):
        if self.supports_mask and not self.mask_token:
            raise ConfigError("supports_mask=true requires a non-empty mask_token")


@dataclass(frozen=True)
class ScoredSequence:
    """Log-probability (natural log) of a target span, token by token."""

    total_logprob: float
    per_token_logprobs: tuple[float, ...]
    token_count: int

    def __post_init__(self):
        if self.token_count < 1 or self.token_count != len(self.per_token_logprobs):
            raise ValueError("token_count must equal len(per_token_logprobs) and be >= 1")
        if abs(math.fsum(self.per_token_logprobs) - self.total_logprob) > 1e-9:
            raise ValueError("total_logprob must equal the sum of per-token log-probs")

    @classmethod
    def from_tokens(cls, logprobs) -> "ScoredSequence":
        lp = tuple(float(x) for x in logprobs)
        return cls(math.fsum(lp), lp, len(lp))

    @property
    def mean_logprob(self) -> float:
        return self.total_logprob / self.token_count


class Backend(abc.ABC):
    """A text generator and span scorer.

    Implementations must be safe to call from several threads at once.
    """

    @abc.abstractmethod
    def generate(self, prompt: str, params: GenerationParams) -> str:
        ...

    @abc.abstractmethod
    def score(self, filled_text: str, target_span: tuple[int, int]) -> ScoredSequence:
        ...

    @abc.abstractmethod
    def capabilities(self) -> BackendCapabilities:
        ...


def generate_with_retry(backend: Backend, prompt: str, params: GenerationParams) -> str:
    """Generate, retrying an empty result once with ``seed + 1``."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    text = backend.generate(prompt, params)
    if text.strip():
        return text
    text = backend.generate(prompt, params.with_seed(params.seed + 1))
    if not text.strip():
        raise EmptyGenerationError(f"empty generation for prompt {prompt[:60]!r} after retry")
    return text
