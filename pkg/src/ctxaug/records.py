"""Observed-string records."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class StringRecord:
    """One observed string with its group label and string-level covariates.

    ``groupings`` holds random-effect keys (observation, dialogue, speaker, ...)
    and ``moderators`` holds named real-valued moderators.
    """

    id: str
    text: str
    group: str | None = None
    covariates: tuple[float, ...] = ()
    moderators: dict[str, float] = field(default_factory=dict)
    groupings: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("StringRecord id must be non-empty")

    def __hash__(self):
        return hash((self.id, self.text, self.group))
