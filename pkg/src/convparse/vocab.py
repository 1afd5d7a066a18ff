"""Vocabularies: natural-language tokens and the query syntax alphabet.

KG element ids are deliberately absent from the syntax alphabet; the decoder
can only produce them by copying subgraph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .text import CLS, SEP, UNK

BOS = "⟨bos⟩"
EOQ = "⟨eoq⟩"

# Query syntax alphabet V_s: keywords, punctuation, variables, and the
# id-prefix markers. ⟨bos⟩ is input-only and never a gold target.
SYNTAX_TOKENS: tuple[str, ...] = (
    EOQ,
    BOS,
    "SELECT",
    "ASK",
    "WHERE",
    "UNION",
    "COUNT",
    "DISTINCT",
    "AS",
    "{",
    "}",
    "(",
    ")",
    ".",
    "?x",
    "?y",
    "?z",
    "?u",
    "?v",
    "?w",
    "?x1",
    "?x2",
    "?x3",
    "?x4",
    "?x5",
    "?x6",
    "?x7",
    "?x8",
    "?x9",
    "?count",
    "wd:",
    "wdt:",
)


@dataclass(frozen=True)
class OutputToken:
    """Either a syntax symbol or a reference to a context-subgraph node."""

    tag: str  # syntax | node
    syntax_id: int | None = None
    node_id: int | None = None

    def __post_init__(self):
        if self.tag == "syntax":
            assert self.syntax_id is not None and self.node_id is None
        elif self.tag == "node":
            assert self.node_id is not None and self.syntax_id is None
        else:  # pragma: no cover
            raise ValueError(f"bad tag {self.tag}")


def syntax_token(symbol: str) -> OutputToken:
    return OutputToken(tag="syntax", syntax_id=SYNTAX_TOKENS.index(symbol))


def node_token(node_id: int) -> OutputToken:
    return OutputToken(tag="node", node_id=node_id)


class Vocab:
    """Token-to-id table; index equals line number in the vocab file."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if UNK not in self.index:
            raise ValueError("vocabulary must contain the unknown token")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def ids(self, tokens: list[str] | tuple[str, ...]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "Vocab":
        return Vocab(Path(path).read_text(encoding="utf-8").splitlines())

    @staticmethod
    def build(token_iterables) -> "Vocab":
        """Specials first, then sorted unique corpus tokens."""
        seen: set[str] = set()
        for toks in token_iterables:
            seen.update(toks)
        specials = [UNK, CLS, SEP]
        rest = sorted(seen - set(specials))
        return Vocab(specials + rest)


def save_syntax_vocab(path: str | Path) -> None:
    Path(path).write_text("".join(t + "\n" for t in SYNTAX_TOKENS), encoding="utf-8")
