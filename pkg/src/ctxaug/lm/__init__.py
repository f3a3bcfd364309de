from .base import (
    Backend,
    BackendCapabilities,
    GenerationParams,
    ScoredSequence,
    generate_with_retry,
)
from .mock import MASK_TOKEN, MockLM, MockLmConfig
from .remote import RemoteBackend, RemoteConfig

__all__ = [
    "Backend",
    "BackendCapabilities",
    "GenerationParams",
    "MASK_TOKEN",
    "MockLM",
    "MockLmConfig",
    "RemoteBackend",
    "RemoteConfig",
    "ScoredSequence",
    "generate_with_retry",
]
