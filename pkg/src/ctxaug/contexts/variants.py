"""Negative-control predictor variants: masked, shuffled, jabberwocky."""

from __future__ import annotations

import random
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

from ..lm.base import Backend, GenerationParams, generate_with_retry
from ..seeding import derive_seed
from ..text import Token, replace_tokens, tokenize

KINDS = ("informative", "masked", "shuffled", "jabberwocky")


@dataclass(frozen=True)
class PredictorVariant:
    kind: str
    text: str
    source_string_id: str = ""
    seed: int | None = None
    fallback: bool = False  # llm jabberwocky failed its check and rule mode was used

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}")


@lru_cache(maxsize=1)
def function_words() -> frozenset[str]:
    """The shipped closed-class stoplist (lower-case)."""
    raw = resources.files(__package__).joinpath("data/function_words.txt").read_text()
    return frozenset(
        line.strip().lower() for line in raw.splitlines() if line.strip() and not line.startswith("#")
    )


def is_function_word(token: str) -> bool:
    return token.lower().replace("’", "'") in function_words()


def informative_variant(s: str, source_string_id: str = "") -> PredictorVariant:
    return PredictorVariant("informative", s, source_string_id)


def mask_variant(s: str, mask_token: str, source_string_id: str = "") -> PredictorVariant:
    """Replace every word and number token with ``mask_token``, in place."""
    if not mask_token:
        raise ValueError("mask_token must be non-empty")
    toks = tokenize(s)
    repl = {i: mask_token for i, t in enumerate(toks) if _is_content_token(t)}
    return PredictorVariant("masked", replace_tokens(s, toks, repl), source_string_id)


def shuffle_variant(s: str, seed: int, source_string_id: str = "") -> PredictorVariant:
    """Permute word tokens among word positions; punctuation stays put."""
    toks = tokenize(s)
    slots = [i for i, t in enumerate(toks) if t.is_word]
    order = [toks[i].text for i in slots]
    random.Random(seed).shuffle(order)
    repl = dict(zip(slots, order))
    return PredictorVariant("shuffled", replace_tokens(s, toks, repl), source_string_id, seed)


# jabberwocky ---------------------------------------------------------------

_ONSETS = ("b", "bl", "br", "d", "dr", "f", "fl", "fr", "g", "gl", "gr", "k", "l", "m", "n",
           "p", "pl", "r", "s", "sk", "sl", "sn", "sp", "st", "t", "tr", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u", "oo", "ee", "ai")
_CODAS = ("", "", "", "n", "m", "r", "k", "p", "sh", "nk", "rp", "x")


def _nonsense(rng: random.Random, n_syll: int) -> str:
    parts = [rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(n_syll)]
    parts[-1] += rng.choice(_CODAS)
    return "".join(parts)


def _match_case(word: str, template: str) -> str:
    letters = [c for c in template if c.isalpha()]
    if len(letters) > 1 and all(c.isupper() for c in letters):
        return word.upper()
    if letters and letters[0].isupper():
        return word[:1].upper() + word[1:]
    return word


def _is_content_token(tok: Token) -> bool:
    return any(c.isalnum() for c in tok.text)


def _jabber_rule(s: str, seed: int) -> str:
    toks = tokenize(s)
    rng = random.Random(derive_seed(seed, "jabberwocky"))
    stop = function_words()
    repl = {}
    for i, t in enumerate(toks):
        if not t.is_word or is_function_word(t.text):
            continue
        n_letters = sum(c.isalpha() for c in t.text)
        n_syll = max(1, min(4, round(n_letters / 3)))
        while True:
            w = _nonsense(rng, n_syll)
            if w not in stop and w != t.text.lower():
                break
        repl[i] = _match_case(w, t.text)
    return replace_tokens(s, toks, repl)


def function_word_signature(s: str) -> list[tuple[int, str | None]]:
    """Per-token skeleton: function words and punctuation kept, content words blanked."""
    sig = []
    for t in tokenize(s):
        if not t.is_word:
            sig.append((0, t.text))
        elif is_function_word(t.text):
            sig.append((1, t.text.lower()))
        else:
            sig.append((2, None))
    return sig


def preserves_function_words(source: str, candidate: str) -> bool:
    """True iff ``candidate`` keeps the function words and punctuation of ``source`` in place."""
    return function_word_signature(source) == function_word_signature(candidate)


def _content_replaced(source: str, candidate: str) -> bool:
    a, b = tokenize(source), tokenize(candidate)
    return all(
        x.text.lower() != y.text.lower()
        for x, y in zip(a, b)
        if x.is_word and not is_function_word(x.text)
    )


def parse_llm_jabberwocky(raw: str) -> str | None:
    """Text following the last ``Output:`` marker, first line only, unquoted."""
    idx = raw.rfind("Output:")
    if idx < 0:
        return None
    line = raw[idx + len("Output:"):].strip().splitlines()
    if not line:
        return None
    out = line[0].strip()
    if len(out) >= 2 and out[0] == out[-1] and out[0] in "'\"":
        out = out[1:-1].strip()
    return out or None


def jabberwocky_variant(
    s: str,
    mode: str = "rule",
    seed: int = 0,
    params: GenerationParams | None = None,
    backend: Backend | None = None,
    prompt: str | None = None,
    source_string_id: str = "",
) -> PredictorVariant:
    """Replace content words with nonsense, keeping function words and punctuation.

    ``mode="rule"`` is deterministic. ``mode="llm"`` sends ``prompt`` (the
    multi-shot exemplar with the predictor filled in) to ``backend`` and keeps
    the result only if it passes the function-word check; otherwise the rule
    output is returned with ``fallback=True``.
    """
    if mode == "rule":
        return PredictorVariant("jabberwocky", _jabber_rule(s, seed), source_string_id, seed)
    if mode != "llm":
        raise ValueError(f"jabberwocky mode must be 'rule' or 'llm', got {mode!r}")
    if backend is None or prompt is None:
        raise ValueError("llm mode needs a backend and a prompt")
    params = (params or GenerationParams(temperature=1.2)).with_seed(seed)
    raw = generate_with_retry(backend, prompt, params)
    cand = parse_llm_jabberwocky(raw)
    if cand is not None and preserves_function_words(s, cand) and _content_replaced(s, cand):
        return PredictorVariant("jabberwocky", cand, source_string_id, seed)
    return PredictorVariant("jabberwocky", _jabber_rule(s, seed), source_string_id, seed, fallback=True)
