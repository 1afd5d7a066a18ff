"""In-memory knowledge graph: triples, labels, and the lookup indexes used by
the linker, subgraph builder, and query executor.

Graphs are immutable after load and safe for concurrent readers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

UNLABELED_FMT = "⟨unlabeled:{id}⟩"


class GraphLoadError(ValueError):
    """Raised for malformed triple or label rows; carries the line number."""


class ElementId(NamedTuple):
    kind: str  # entity | relation | type
    id: str


class Triple(NamedTuple):
    subject: str
    predicate: str
    object: str


@dataclass
class KnowledgeGraph:
    triples: list[Triple]
    labels: dict[str, str]
    instance_of: str

    by_subject: dict[str, list[Triple]] = field(default_factory=dict, repr=False)
    by_object: dict[str, list[Triple]] = field(default_factory=dict, repr=False)
    by_predicate: dict[str, list[Triple]] = field(default_factory=dict, repr=False)
    by_sp: dict[tuple[str, str], list[str]] = field(default_factory=dict, repr=False)
    by_po: dict[tuple[str, str], list[str]] = field(default_factory=dict, repr=False)
    _triple_set: set[Triple] = field(default_factory=set, repr=False)

    def __post_init__(self):
        for t in self.triples:
            self.by_subject.setdefault(t.subject, []).append(t)
            self.by_object.setdefault(t.object, []).append(t)
            self.by_predicate.setdefault(t.predicate, []).append(t)
            self.by_sp.setdefault((t.subject, t.predicate), []).append(t.object)
            self.by_po.setdefault((t.predicate, t.object), []).append(t.subject)
            self._triple_set.add(t)

    # -- derived id sets ----------------------------------------------------

    @property
    def relation_ids(self) -> set[str]:
        return set(self.by_predicate)

    @property
    def type_ids(self) -> set[str]:
        return {t.object for t in self.by_predicate.get(self.instance_of, ())}

    @property
    def entity_ids(self) -> set[str]:
        ids = set(self.by_subject)
        ids.update(t.object for t in self.triples if t.predicate != self.instance_of)
        return ids

    def stats(self) -> dict[str, int]:
        return {
            "triples": len(self.triples),
            "entities": len(self.entity_ids),
            "relations": len(self.relation_ids),
            "types": len(self.type_ids),
            "labels": len(self.labels),
        }

    # -- lookups ------------------------------------------------------------

    def label(self, element_id: str) -> str:
        got = self.labels.get(element_id)
        return got if got is not None else UNLABELED_FMT.format(id=element_id)

    def has_label(self, element_id: str) -> bool:
        return element_id in self.labels

    def contains(self, s: str, p: str, o: str) -> bool:
        return Triple(s, p, o) in self._triple_set

    def match(self, s: str | None, p: str | None, o: str | None) -> list[Triple]:
        """All triples matching the pattern; None is a wildcard."""
        if s is not None and p is not None and o is not None:
            t = Triple(s, p, o)
            return [t] if t in self._triple_set else []
        if s is not None and p is not None:
            return [Triple(s, p, obj) for obj in self.by_sp.get((s, p), ())]
        if p is not None and o is not None:
            return [Triple(sub, p, o) for sub in self.by_po.get((p, o), ())]
        if s is not None:
            triples = self.by_subject.get(s, ())
            return [t for t in triples if o is None or t.object == o]
        if o is not None:
            triples = self.by_object.get(o, ())
            return [t for t in triples if p is None or t.predicate == p]
        if p is not None:
            return list(self.by_predicate.get(p, ()))
        return list(self.triples)

    def neighborhood(self, e: str) -> list[Triple]:
        """Triples where e is subject or object, in load order, deduplicated."""
        out = list(self.by_subject.get(e, ()))
        seen = set(out)
        for t in self.by_object.get(e, ()):
            if t not in seen:
                out.append(t)
                seen.add(t)
        return out

    def types_of(self, e: str) -> list[str]:
        """Objects of (e, instance_of, ·) triples, in load order."""
        return list(self.by_sp.get((e, self.instance_of), ()))


def _parse_tsv(path: Path, n_cols: int) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != n_cols or any(not c for c in cols):
                raise GraphLoadError(f"{path}:{lineno}: expected {n_cols} tab-separated fields, got {line!r}")
            yield lineno, cols


def load_graph(triples_file: str | Path, labels_file: str | Path, instance_of: str) -> KnowledgeGraph:
    """Load the 3-column triples file and 2-column labels file.

    Duplicate triples are silently deduplicated; a duplicated label id keeps
    the last row. Unlabeled ids are served with a placeholder label so the
    decoder can still copy them.
    """
    triples: list[Triple] = []
    seen: set[Triple] = set()
    for _, (s, p, o) in _parse_tsv(Path(triples_file), 3):
        t = Triple(s, p, o)
        if t not in seen:
            triples.append(t)
            seen.add(t)
    labels: dict[str, str] = {}
    for _, (eid, label) in _parse_tsv(Path(labels_file), 2):
        labels[eid] = label
    return KnowledgeGraph(triples=triples, labels=labels, instance_of=instance_of)


def dump_graph(g: KnowledgeGraph, triples_file: str | Path, labels_file: str | Path) -> None:
    """Inverse of load_graph; load(dump(load(x))) is a fixed point."""
    with open(triples_file, "w", encoding="utf-8") as fh:
        for t in g.triples:
            fh.write(f"{t.subject}\t{t.predicate}\t{t.object}\n")
    with open(labels_file, "w", encoding="utf-8") as fh:
        for eid, label in g.labels.items():
            fh.write(f"{eid}\t{label}\n")
