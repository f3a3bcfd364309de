"""Prompt profiles: named prompt templates with validated substitution slots."""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..lm.base import GenerationParams

SLOTS = frozenset({"word", "definition", "left", "predictor", "base_prompt"})

# allowed and required slots per template role
_ROLE_SLOTS = {
    "definition_prompt": ({"word", "base_prompt"}, {"word"}),
    "left_prompt": ({"word", "definition"}, {"word", "definition"}),
    "right_prompt": ({"word", "definition", "left"}, {"word", "left"}),
    "regression_context_prompt": ({"predictor"}, {"predictor"}),
    "eval_prompt": (set(), set()),
}


def template_slots(template: str) -> set[str]:
    """Names of the ``{slot}`` fields referenced by ``template``."""
    try:
        parsed = list(string.Formatter().parse(template))
    except ValueError as exc:
        raise ConfigError(f"malformed template {template[:40]!r}: {exc}") from exc
    names = set()
    for _, name, spec, conv in parsed:
        if name is None:
            continue
        if not name or spec or conv:
            raise ConfigError(f"template slots must be bare names, got {{{name}}} in {template[:40]!r}")
        names.add(name)
    return names


@dataclass(frozen=True)
class PromptProfile:
    name: str
    definition_prompt: str
    left_prompt: str
    right_prompt: str
    regression_context_prompt: str
    eval_prompt: str = ""
    base_vignette: dict[str, str] | None = None
    generation: dict = field(default_factory=dict)
    regression_generation: dict = field(default_factory=dict)
    jabberwocky_generation: dict = field(default_factory=dict)
    jabberwocky_prompt: str = ""

    def __post_init__(self):
        for role, (allowed, required) in _ROLE_SLOTS.items():
            slots = template_slots(getattr(self, role))
            unknown = slots - SLOTS
            if unknown:
                raise ConfigError(f"{self.name}.{role}: unknown slots {sorted(unknown)}")
            extra = slots - allowed
            if extra:
                raise ConfigError(f"{self.name}.{role}: slots {sorted(extra)} not valid for this template")
            missing = required - slots
            if missing:
                raise ConfigError(f"{self.name}.{role}: missing required slots {sorted(missing)}")
        uses_base = "base_prompt" in template_slots(self.definition_prompt)
        if uses_base and not self.base_vignette:
            raise ConfigError(f"{self.name}: definition_prompt uses {{base_prompt}} but no base_vignette is set")
        if self.base_vignette and not uses_base:
            raise ConfigError(f"{self.name}: base_vignette set but definition_prompt never references {{base_prompt}}")
        if self.jabberwocky_prompt and template_slots(self.jabberwocky_prompt) != {"predictor"}:
            raise ConfigError(f"{self.name}: jabberwocky_prompt must reference exactly {{predictor}}")

    def digest(self) -> str:
        """Content hash used to key score caches."""
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "definition_prompt": self.definition_prompt,
            "left_prompt": self.left_prompt,
            "right_prompt": self.right_prompt,
            "regression_context_prompt": self.regression_context_prompt,
            "eval_prompt": self.eval_prompt,
            "base_vignette": self.base_vignette,
            "jabberwocky_prompt": self.jabberwocky_prompt,
        }

    def base_prompt_for(self, group: str | None) -> str:
        if not self.base_vignette:
            return ""
        if group not in self.base_vignette:
            raise ConfigError(f"{self.name}: no base vignette for group {group!r} "
                              f"(have {sorted(self.base_vignette)})")
        return self.base_vignette[group]

    def params(self, stage: str = "generation", seed: int = 0, max_tokens: int = 64) -> GenerationParams:
        """Generation parameters recorded for ``stage`` with the given seed."""
        d = dict(getattr(self, stage) or {})
        return GenerationParams(seed=seed, max_tokens=max_tokens, **d)

    # rendering ---------------------------------------------------------------

    def definition(self, word: str, group: str | None = None) -> str:
        kw = {"word": word}
        if "base_prompt" in template_slots(self.definition_prompt):
            kw["base_prompt"] = self.base_prompt_for(group)
        return self.definition_prompt.format(**kw)

    def left(self, word: str, definition: str) -> str:
        return _render(self.left_prompt, word=word, definition=definition)

    def right(self, word: str, definition: str, left: str) -> str:
        return _render(self.right_prompt, word=word, definition=definition, left=left)

    def reflection(self, predictor: str) -> str:
        return self.regression_context_prompt.format(predictor=predictor)

    def jabberwocky(self, predictor: str) -> str:
        if not self.jabberwocky_prompt:
            raise ConfigError(f"{self.name}: no jabberwocky prompt configured")
        return self.jabberwocky_prompt.format(predictor=predictor)


def _render(template: str, **kw) -> str:
    return template.format(**{k: v for k, v in kw.items() if k in template_slots(template)})


def _from_mapping(name: str, d: dict, jabberwocky_prompt: str) -> PromptProfile:
    known = set(PromptProfile.__dataclass_fields__) - {"name"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"profile {name!r}: unknown keys {sorted(unknown)}")
    d = dict(d)
    d.setdefault("jabberwocky_prompt", jabberwocky_prompt)
    return PromptProfile(name=name, **d)


def load_profiles(path: str | Path | None = None) -> dict[str, PromptProfile]:
    """Load all profiles from a YAML file (the shipped file by default)."""
    if path is None:
        text = resources.files(__package__).joinpath("data/profiles.yaml").read_text()
    else:
        text = Path(path).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict) or "profiles" not in data:
        raise ConfigError("profile file must contain a 'profiles' mapping")
    jab = data.get("jabberwocky_prompt", "")
    return {name: _from_mapping(name, d, jab) for name, d in data["profiles"].items()}


@lru_cache(maxsize=None)
def _shipped() -> dict[str, PromptProfile]:
    return load_profiles()


def get_profile(name: str, path: str | Path | None = None) -> PromptProfile:
    profiles = load_profiles(path) if path is not None else _shipped()
    if name not in profiles:
        raise ConfigError(f"unknown prompt profile {name!r} (have {sorted(profiles)})")
    return profiles[name]
