"""Context generation for the two-sample and regression tasks."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from ..errors import CtxAugError, PartialOutputError
from ..lm.base import Backend, GenerationParams, generate_with_retry
from ..records import StringRecord
from ..seeding import derive_seed
from .profiles import PromptProfile

PLACEHOLDER = "<<<STR>>>"


@dataclass(frozen=True)
class ContextTemplate:
    """A generated left/right pair around a placeholder, with provenance.

    Regression contexts keep the reflection text in ``left_text`` and leave
    ``right_text`` empty.
    """

    id: str
    source_string_id: str
    group_label: str | None
    left_text: str
    right_text: str
    placeholder: str = PLACEHOLDER

    def __post_init__(self):
        if self.placeholder != PLACEHOLDER:
            raise ValueError(f"placeholder must be {PLACEHOLDER!r}")
        if PLACEHOLDER in self.left_text or PLACEHOLDER in self.right_text:
            raise ValueError("context fragments may not contain the placeholder")
        if not self.id or not self.source_string_id:
            raise ValueError("context needs an id and a source string id")

    @property
    def text(self) -> str:
        return " ".join(p for p in (self.left_text, PLACEHOLDER, self.right_text) if p)

    @property
    def context_text(self) -> str:
        """The context with the placeholder removed (left and right joined)."""
        return " ".join(p for p in (self.left_text, self.right_text) if p)

    def fill(self, s: str) -> tuple[str, tuple[int, int]]:
        """Insert ``s`` at the placeholder; return the text and the span of ``s``."""
        prefix = self.left_text + " " if self.left_text else ""
        suffix = " " + self.right_text if self.right_text else ""
        start = len(prefix)
        return prefix + s + suffix, (start, start + len(s))

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "source_string_id": self.source_string_id,
            "group_label": self.group_label,
            "left_text": self.left_text,
            "right_text": self.right_text,
            "placeholder": self.placeholder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContextTemplate":
        return cls(**d)


def context_id(string_id: str, j: int) -> str:
    return f"{string_id}#{j}"


def _clean(fragment: str) -> str:
    return " ".join(fragment.replace(PLACEHOLDER, " ").split())


def _contexts_for_string(s: StringRecord, J: int, profile: PromptProfile, params: GenerationParams,
                         backend: Backend) -> list[ContextTemplate]:
    # definition once, then all left fragments, then the right fragment for each left
    def gen(prompt: str, *labels) -> str:
        return generate_with_retry(backend, prompt, params.with_seed(derive_seed(params.seed, *labels)))

    definition = _clean(gen(profile.definition(s.text, s.group), "definition", s.id))
    lefts = [_clean(gen(profile.left(s.text, definition), "left", s.id, j)) for j in range(J)]
    rights = [_clean(gen(profile.right(s.text, definition, lefts[j]), "right", s.id, j)) for j in range(J)]
    return [
        ContextTemplate(context_id(s.id, j), s.id, s.group, lefts[j], rights[j]) for j in range(J)
    ]


def _run_per_string(strings, J, worker, completed, workers: int):
    if J < 1:
        raise ValueError("J must be >= 1")
    done: dict[str, list[ContextTemplate]] = {}
    for t in completed or ():
        done.setdefault(t.source_string_id, []).append(t)
    done = {k: sorted(v, key=lambda t: t.id) for k, v in done.items() if len(v) == J}
    todo = [s for s in strings if s.id not in done]

    failures: list[tuple[str, Exception]] = []

    def task(s):
        try:
            return s.id, worker(s)
        except CtxAugError as exc:
            failures.append((s.id, exc))
            return s.id, None

    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, todo))
    else:
        results = [task(s) for s in todo]
    for sid, res in results:
        if res is not None:
            done[sid] = res
    ordered = [t for s in strings if s.id in done for t in done[s.id]]
    if failures:
        sid, exc = failures[0]
        raise PartialOutputError(
            f"generation failed for {len(failures)} string(s), first {sid!r}: {exc}", ordered
        ) from exc
    return ordered


def gen_two_sample_contexts(
    strings: list[StringRecord],
    J: int,
    profile: PromptProfile,
    params: GenerationParams,
    backend: Backend,
    completed: list[ContextTemplate] | None = None,
    workers: int = 1,
) -> list[ContextTemplate]:
    """J left/right templates per string, in input order.

    Pass the ``completed`` list from a :class:`PartialOutputError` to resume;
    finished strings are not regenerated.
    """
    for s in strings:
        if not s.text:
            raise ValueError(f"string {s.id!r} is empty")
    return _run_per_string(
        strings, J, lambda s: _contexts_for_string(s, J, profile, params, backend), completed, workers
    )


def gen_regression_contexts(
    predictor: StringRecord,
    J: int,
    profile: PromptProfile,
    params: GenerationParams,
    backend: Backend,
) -> list[ContextTemplate]:
    """J reflection contexts conditioned only on the predictor text."""
    if J < 1:
        raise ValueError("J must be >= 1")
    prompt = profile.reflection(predictor.text)
    out = []
    for j in range(J):
        p = params.with_seed(derive_seed(params.seed, "reflect", predictor.id, j))
        text = _clean(generate_with_retry(backend, prompt, p))
        out.append(ContextTemplate(context_id(predictor.id, j), predictor.id, None, text, ""))
    return out


def gen_all_regression_contexts(predictors, J, profile, params, backend, completed=None, workers: int = 1):
    """Regression contexts for many predictors, resumable like the two-sample generator."""
    return _run_per_string(
        predictors, J, lambda s: gen_regression_contexts(s, J, profile, params, backend), completed, workers
    )
