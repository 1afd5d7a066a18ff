"""Shared text utilities: tokenization and the pruning stopword list."""

from __future__ import annotations

import re

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

CLS = "[CLS]"
SEP = "[SEP]"
UNK = "⟨unk⟩"

# fixed 50-word list used by subgraph pruning
STOPWORDS = frozenset(
    """a an the and or of in on at to for by with from as is are was were be
    been do does did have has had that this these those which who what how
    many much it its he she they them his her their there not no so""".split()
)
assert len(STOPWORDS) == 50


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation, keep punctuation."""
    return _WORD_RE.findall(text.lower())


def content_tokens(tokens: list[str] | tuple[str, ...]) -> set[str]:
    """Non-stopword word tokens (punctuation dropped)."""
    return {t for t in tokens if t not in STOPWORDS and any(c.isalnum() for c in t)}
