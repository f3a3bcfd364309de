"""Word-level tokenization used by the negative-control variants.

Splitting is on whitespace and punctuation, independent of any backend
tokenizer. Tokens carry character spans so text can be rewritten in place.
"""

from __future__ import annotations

import re
from typing import NamedTuple


class Token(NamedTuple):
    text: str
    start: int
    end: int

    @property
    def is_word(self) -> bool:
        return any(ch.isalpha() for ch in self.text)


_BASE = r"[^\W\d_]+(?:['’][^\W\d_]+)*|\d+(?:[.,]\d+)*|[^\w\s]"


def _pattern(extra: tuple[str, ...]) -> re.Pattern:
    if not extra:
        return re.compile(_BASE)
    alts = "|".join(re.escape(e) for e in sorted(extra, key=len, reverse=True))
    return re.compile(f"(?:{alts})|{_BASE}")


_CACHE: dict[tuple[str, ...], re.Pattern] = {}


def tokenize(text: str, extra_tokens: tuple[str, ...] = ()) -> list[Token]:
    """Split ``text`` into word, number, and punctuation tokens.

    Strings listed in ``extra_tokens`` (e.g. a mask token) are kept whole.
    """
    pat = _CACHE.get(extra_tokens)
    if pat is None:
        pat = _CACHE[extra_tokens] = _pattern(extra_tokens)
    return [Token(m.group(0), m.start(), m.end()) for m in pat.finditer(text)]


def words(text: str) -> list[str]:
    return [t.text for t in tokenize(text) if t.is_word]


def replace_tokens(text: str, tokens: list[Token], replacements: dict[int, str]) -> str:
    """Rewrite ``text`` substituting token ``i`` with ``replacements[i]``.

    Whitespace and untouched tokens are preserved byte-for-byte.
    """
    out = []
    pos = 0
    for i, tok in enumerate(tokens):
        out.append(text[pos:tok.start])
        out.append(replacements.get(i, tok.text))
        pos = tok.end
    out.append(text[pos:])
    return "".join(out)
