"""Deterministic synthetic language model.

Strings and contexts belong to ordered categories, detected as whole-word
occurrences of the category names. A target span scored under a conditioning
text gets

    -(a + b * dist(cat(target), cat(conditioning))) + bonus + noise

where ``dist`` is the distance between category positions, ``bonus`` is the
optional self-affinity ``beta_self`` applied when the target string appears
verbatim in the conditioning text, and ``noise`` is uniform on
``[-sigma, sigma]`` drawn from a seeded hash of (target, conditioning).

Generation echoes the single-quoted spans of the prompt together with a tag
naming the prompt's majority category, plus seeded filler words, so contexts
inherit the category (and the text) of the string they were generated from.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

from ..errors import AlignmentError, ConfigError
from ..seeding import splitmix64, text_hash64
from .base import Backend, BackendCapabilities, GenerationParams, ScoredSequence

MASK_TOKEN = "<mask>"
_TWO64 = float(1 << 64)
_FILLER = (
    "often", "seen", "near", "with", "many", "kinds", "small", "large", "old",
    "new", "bright", "quiet", "around", "every", "day", "places", "people",
    "known", "for", "its", "shape", "use", "common", "rare",
)
_QUOTED = re.compile(r"'([^']+)'")


@dataclass(frozen=True)
class MockLmConfig:
    categories: tuple[str, ...] = ("animals", "body", "cities", "food", "plants")
    a: float = 2.0
    b: float = 3.0
    sigma: float = 0.5
    seed: int = 0
    beta_self: float = 0.0
    model_identifier: str = "mock-lm-v1"
    filler_words: int = 3

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.categories:
            raise ConfigError("mock needs at least one category")
        if len(set(c.lower() for c in self.categories)) != len(self.categories):
            raise ConfigError("mock category names must be distinct")
        if not self.a > 0 or not self.b >= 0 or not self.sigma >= 0:
            raise ConfigError("mock requires a > 0, b >= 0, sigma >= 0")


@dataclass
class MockLM(Backend):
    config: MockLmConfig = field(default_factory=MockLmConfig)

    def __post_init__(self):
        cats = self.config.categories
        self._index = {c.lower(): i for i, c in enumerate(cats)}
        self._cat_re = re.compile(
            r"(?<!\w)(" + "|".join(re.escape(c) for c in cats) + r")(?!\w)", re.IGNORECASE
        )
        self._category = lru_cache(maxsize=1 << 16)(self._category_uncached)
        self._hash = lru_cache(maxsize=1 << 16)(text_hash64)
        self._caps = BackendCapabilities(
            supports_mask=True,
            mask_token=MASK_TOKEN,
            supports_bidirectional_scoring=True,
            model_identifier=self._model_id(),
        )

    def _model_id(self) -> str:
        c = self.config
        return (f"{c.model_identifier}[{','.join(c.categories)};a={c.a!r};b={c.b!r};"
                f"sigma={c.sigma!r};beta_self={c.beta_self!r};seed={c.seed}]")

    # categories -------------------------------------------------------------

    def _category_uncached(self, text: str) -> int:
        """Position of the majority category in ``text``; ties go to the first seen.

        Text with no category word sits at position ``len(categories)``.
        """
        found = [self._index[m.group(1).lower()] for m in self._cat_re.finditer(text)]
        if not found:
            return len(self.config.categories)
        counts = Counter(found)
        best = max(counts.values())
        for pos in found:
            if counts[pos] == best:
                return pos
        raise AssertionError("unreachable")

    def category_of(self, text: str) -> str | None:
        pos = self._category(text)
        cats = self.config.categories
        return cats[pos] if pos < len(cats) else None

    def distance(self, target: str, conditioning: str) -> int:
        return abs(self._category(target) - self._category(conditioning))

    # backend interface ---------------------------------------------------------

    def capabilities(self) -> BackendCapabilities:
        return self._caps

    def noise(self, target: str, conditioning: str) -> float:
        """Seeded uniform noise on [-sigma, sigma] for a (target, conditioning) pair."""
        sigma = self.config.sigma
        if sigma == 0:
            return 0.0
        h = self.config.seed & 0xFFFFFFFFFFFFFFFF
        h = splitmix64(h ^ self._hash(target))
        h = splitmix64(h ^ self._hash(conditioning))
        u = h / _TWO64
        return sigma * (2.0 * u - 1.0)

    def logprob(self, target: str, conditioning: str) -> float:
        c = self.config
        value = -(c.a + c.b * self.distance(target, conditioning))
        if c.beta_self and _contains_words(conditioning, target):
            value += c.beta_self
        return value + self.noise(target, conditioning)

    def score(self, filled_text: str, target_span: tuple[int, int]) -> ScoredSequence:
        start, end = target_span
        if not (0 <= start < end <= len(filled_text)):
            raise AlignmentError(f"span {target_span} outside text of length {len(filled_text)}",
                                 boundary=start if start < 0 or start >= len(filled_text) else end)
        if start > 0 and filled_text[start - 1].isalnum() and filled_text[start].isalnum():
            raise AlignmentError(f"span start {start} splits a word", boundary=start)
        if end < len(filled_text) and filled_text[end - 1].isalnum() and filled_text[end].isalnum():
            raise AlignmentError(f"span end {end} splits a word", boundary=end)
        target = filled_text[start:end]
        tokens = target.split()
        if not tokens:
            raise AlignmentError("target span contains no tokens", boundary=start)
        conditioning = filled_text[:start] + filled_text[end:]
        total = self.logprob(target.strip(), conditioning)
        k = len(tokens)
        per = [total / k] * k
        per[-1] = total - sum(per[:-1])
        return ScoredSequence(total, tuple(per), k)

    def generate(self, prompt: str, params: GenerationParams) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        parts: list[str] = []
        cat = self.category_of(prompt)
        if cat is not None:
            parts.append(f"about {cat}")
        seen = set()
        for span in _QUOTED.findall(prompt):
            span = span.strip()
            if span and span not in seen:
                seen.add(span)
                parts.append(span)
        h = splitmix64(text_hash64(prompt) ^ (params.seed & 0xFFFFFFFFFFFFFFFF)
                       ^ (self.config.seed * 0x9E3779B1 & 0xFFFFFFFFFFFFFFFF))
        filler = []
        for _ in range(self.config.filler_words):
            h = splitmix64(h)
            filler.append(_FILLER[h % len(_FILLER)])
        parts.append(" ".join(filler))
        out = " ".join(parts).split()
        return " ".join(out[: params.max_tokens])


def _contains_words(haystack: str, needle: str) -> bool:
    needle = needle.strip()
    if not needle:
        return False
    return f" {needle} " in f" {' '.join(haystack.split())} "
