"""Entity grounding: multi-pattern label matching over the utterance plus
popularity-based disambiguation.

Matching runs over token sequences, so labels only match on token
boundaries ("art" never fires inside "start"). The matcher is an
Aho-Corasick automaton whose alphabet is word tokens; construction is
linear in total label length and matching is linear in utterance length
plus the number of matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .kg import KnowledgeGraph
from .text import tokenize


@dataclass(frozen=True)
class MentionSpan:
    start: int
    end: int  # exclusive token offset
    surface: str
    candidates: tuple[str, ...]  # entity ids, most popular first, ties by id


@dataclass
class PopularityTable:
    counts: dict[str, int] = field(default_factory=dict)

    def get(self, entity_id: str) -> int:
        return self.counts.get(entity_id, 0)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for eid in sorted(self.counts):
                fh.write(f"{eid}\t{self.counts[eid]}\n")

    @staticmethod
    def load(path: str | Path) -> "PopularityTable":
        counts: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    eid, cnt = line.rstrip("\n").split("\t")
                    counts[eid] = int(cnt)
        return PopularityTable(counts)


class _AcNode:
    __slots__ = ("children", "fail", "outputs")

    def __init__(self):
        self.children: dict[str, _AcNode] = {}
        self.fail: _AcNode | None = None
        self.outputs: list[tuple[int, tuple[str, ...]]] = []  # (pattern length, ids)


class LabelMatcher:
    """Aho-Corasick automaton over label token sequences."""

    def __init__(self, patterns: dict[tuple[str, ...], tuple[str, ...]]):
        self._root = _AcNode()
        for tokens, ids in patterns.items():
            node = self._root
            for tok in tokens:
                node = node.children.setdefault(tok, _AcNode())
            node.outputs.append((len(tokens), ids))
        self._build_failure_links()

    def _build_failure_links(self) -> None:
        queue: list[_AcNode] = []
        for child in self._root.children.values():
            child.fail = self._root
            queue.append(child)
        while queue:
            node = queue.pop(0)
            for tok, child in node.children.items():
                fail = node.fail
                while fail is not None and tok not in fail.children:
                    fail = fail.fail
                child.fail = fail.children[tok] if fail is not None and tok in fail.children else self._root
                child.outputs.extend(child.fail.outputs)
                queue.append(child)

    def find_all(self, tokens: list[str]) -> list[tuple[int, int, tuple[str, ...]]]:
        """Every label occurrence as (start, end, entity ids)."""
        matches = []
        node = self._root
        for i, tok in enumerate(tokens):
            while node is not self._root and tok not in node.children:
                node = node.fail
            node = node.children.get(tok, self._root)
            for length, ids in node.outputs:
                matches.append((i + 1 - length, i + 1, ids))
        return matches


def select_spans(matches: list[tuple[int, int, tuple[str, ...]]]) -> list[tuple[int, int, tuple[str, ...]]]:
    """Leftmost-longest non-overlapping selection over raw matches."""
    chosen: list[tuple[int, int, tuple[str, ...]]] = []
    cursor = 0
    for m in sorted(matches, key=lambda m: (m[0], -(m[1] - m[0]))):
        if m[0] >= cursor:
            chosen.append(m)
            cursor = m[1]
    return chosen


def entity_lexicon(g: KnowledgeGraph) -> dict[tuple[str, ...], tuple[str, ...]]:
    """Lowercased label tokens -> entity ids sharing that label.

    Entities are ids that occur as a subject or as the object of a
    non-instance-of triple; relation ids and ids seen only in type
    position are excluded from grounding.
    """
    lex: dict[tuple[str, ...], list[str]] = {}
    for eid in sorted(g.entity_ids):
        if not g.has_label(eid):
            continue
        key = tuple(tokenize(g.label(eid)))
        if key:
            lex.setdefault(key, []).append(eid)
    return {k: tuple(v) for k, v in lex.items()}


def build_lexicon(g: KnowledgeGraph) -> LabelMatcher:
    return LabelMatcher(entity_lexicon(g))


def build_popularity(interactions, count_query_ids) -> PopularityTable:
    """Count how often each wd: element occurs across gold training parses.

    `interactions` is an iterable of records with per-turn gold sparql;
    `count_query_ids` extracts the wd:-prefixed ids of one query string.
    """
    counts: dict[str, int] = {}
    for inter in interactions:
        for turn in inter["turns"]:
            for eid in count_query_ids(turn["sparql"]):
                counts[eid] = counts.get(eid, 0) + 1
    return PopularityTable(counts)


class Linker:
    """Grounds utterance token spans to KG entities."""

    def __init__(self, g: KnowledgeGraph, popularity: PopularityTable | None = None, top_k: int | None = None):
        self.kg = g
        self.popularity = popularity or PopularityTable()
        self.top_k = top_k
        self.matcher = build_lexicon(g)

    def _rank(self, ids: tuple[str, ...]) -> tuple[str, ...]:
        return tuple(sorted(ids, key=lambda e: (-self.popularity.get(e), e)))

    def find_mentions(self, tokens: list[str]) -> list[MentionSpan]:
        spans = select_spans(self.matcher.find_all(tokens))
        return [
            MentionSpan(start=s, end=e, surface=" ".join(tokens[s:e]), candidates=self._rank(ids))
            for s, e, ids in spans
        ]

    def disambiguate(self, span: MentionSpan) -> str:
        """Most popular candidate; ties resolved by ascending id."""
        return span.candidates[0]

    def link(self, tokens: list[str]) -> tuple[list[MentionSpan], list[str]]:
        """Mention spans plus the grounded entity ids (order preserved).

        With top_k set, each span forwards its K most popular candidates
        instead of committing to one.
        """
        spans = self.find_mentions(tokens)
        entities: list[str] = []
        for span in spans:
            picked = span.candidates[: self.top_k] if self.top_k else (self.disambiguate(span),)
            for e in picked:
                if e not in entities:
                    entities.append(e)
        return spans, entities
