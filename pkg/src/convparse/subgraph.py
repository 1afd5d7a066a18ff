"""Per-turn dynamic context subgraphs.

A turn graph is built from typed one-hop neighborhoods of the linked
entities, optionally extended by context-dependent type linking, then
merged with a sliding window of previous turn graphs and the previous
answer's entities. Triples are expanded into node paths: each (s, r, o)
contributes edges s->r and r->o, with relation nodes shared by id so the
decoder can copy relations exactly like entities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .kg import UNLABELED_FMT, KnowledgeGraph
from .sparql import Answer
from .text import content_tokens, tokenize

ENT_HOP = "ent_hop"
TYPE_LINK = "type_link"
CARRYOVER = "carryover"

# eviction removes low priority first; ent_hop nodes are never evicted
_EVICTION_ORDER = {CARRYOVER: 0, TYPE_LINK: 1, ENT_HOP: 2}

DEFAULT_NODE_CAP = 512
ANSWER_INJECT_CAP = 10


class MergedGraphTooLarge(RuntimeError):
    pass


@dataclass(frozen=True)
class SubgraphNode:
    node_id: int
    element: str
    node_class: str  # entity | relation | type
    label_tokens: tuple[str, ...]
    origin: str  # ent_hop | type_link | carryover


@dataclass
class ContextSubgraph:
    nodes: list[SubgraphNode] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict, repr=False)
    _edge_set: set[tuple[int, int]] = field(default_factory=set, repr=False)

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, element: str) -> int | None:
        return self._index.get(element)

    def add_node(self, element: str, node_class: str, label_tokens: tuple[str, ...], origin: str) -> int:
        """Add a node unless the element is already present; returns its id."""
        existing = self._index.get(element)
        if existing is not None:
            return existing
        node_id = len(self.nodes)
        self.nodes.append(SubgraphNode(node_id, element, node_class, label_tokens, origin))
        self._index[element] = node_id
        return node_id

    def add_edge(self, src: int, dst: int) -> None:
        if (src, dst) not in self._edge_set:
            self.edges.append((src, dst))
            self._edge_set.add((src, dst))

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"id": n.element, "label": " ".join(n.label_tokens), "class": n.node_class, "origin": n.origin}
                for n in self.nodes
            ],
            "edges": [[s, d] for s, d in self.edges],
        }


def node_label_tokens(g: KnowledgeGraph, element: str) -> tuple[str, ...]:
    label = g.label(element)
    if label == UNLABELED_FMT.format(id=element):
        return (element.lower(),)
    return tuple(tokenize(label))


class SubgraphBuilder:
    """Builds entity, type-link, and merged turn graphs over one KG."""

    def __init__(self, g: KnowledgeGraph, node_cap: int = DEFAULT_NODE_CAP):
        self.kg = g
        self.node_cap = node_cap

    # -- helpers ------------------------------------------------------------

    def _add(self, out: ContextSubgraph, element: str, node_class: str, origin: str) -> int:
        return out.add_node(element, node_class, node_label_tokens(self.kg, element), origin)

    def _add_triple(self, out: ContextSubgraph, s: str, s_cls: str, r: str, o: str, o_cls: str, origin: str) -> None:
        si = self._add(out, s, s_cls, origin)
        ri = self._add(out, r, "relation", origin)
        oi = self._add(out, o, o_cls, origin)
        out.add_edge(si, ri)
        out.add_edge(ri, oi)

    # -- G^ent --------------------------------------------------------------

    def entity_subgraph(self, entities: list[str]) -> ContextSubgraph:
        """Typed one-hop neighborhood: incident triples with the far endpoint
        replaced by each of its instance-of types; untyped endpoints are kept
        as themselves so answer entities remain copyable."""
        kg = self.kg
        out = ContextSubgraph()
        for e in entities:
            self._add(out, e, "entity", ENT_HOP)
            for t in kg.by_subject.get(e, ()):
                obj_types = kg.types_of(t.object)
                if obj_types:
                    for ty in obj_types:
                        self._add_triple(out, e, "entity", t.predicate, ty, "type", ENT_HOP)
                else:
                    o_cls = "type" if t.predicate == kg.instance_of else "entity"
                    self._add_triple(out, e, "entity", t.predicate, t.object, o_cls, ENT_HOP)
            for t in kg.by_object.get(e, ()):
                subj_types = kg.types_of(t.subject)
                if subj_types:
                    for ty in subj_types:
                        self._add_triple(out, ty, "type", t.predicate, e, "entity", ENT_HOP)
                else:
                    self._add_triple(out, t.subject, "entity", t.predicate, e, "entity", ENT_HOP)
        return out

    # -- G^type -------------------------------------------------------------

    def type_link_subgraph(self, entities: list[str], utterance_tokens: list[str]) -> ContextSubgraph:
        """One- and two-hop outward expansion over typed neighbors, pruned by
        string overlap: a triple is kept only when a non-stopword label token
        of its neighbor, or of one of the neighbor's types, occurs in the
        utterance."""
        kg = self.kg
        utter = content_tokens(utterance_tokens)
        out = ContextSubgraph()

        def overlaps(element: str) -> bool:
            return bool(content_tokens(node_label_tokens(kg, element)) & utter)

        def neighbor_kept(n: str, n_types: list[str]) -> bool:
            return overlaps(n) or any(overlaps(t) for t in n_types)

        for ent in entities:
            for t1 in kg.by_subject.get(ent, ()):
                n1 = t1.object
                n1_types = kg.types_of(n1)
                if not n1_types:
                    continue
                if neighbor_kept(n1, n1_types):
                    self._add_triple(out, ent, "entity", t1.predicate, n1, "entity", TYPE_LINK)
                    for ty in n1_types:
                        if overlaps(ty) or overlaps(n1):
                            self._add_triple(out, n1, "entity", kg.instance_of, ty, "type", TYPE_LINK)
                for t2 in kg.by_subject.get(n1, ()):
                    n2 = t2.object
                    n2_types = kg.types_of(n2)
                    if not n2_types:
                        continue
                    if neighbor_kept(n2, n2_types):
                        self._add_triple(out, n1, "entity", t2.predicate, n2, "entity", TYPE_LINK)
                        for ty in n2_types:
                            if overlaps(ty) or overlaps(n2):
                                self._add_triple(out, n2, "entity", kg.instance_of, ty, "type", TYPE_LINK)
        return out

    # -- carryover ----------------------------------------------------------

    def answer_subgraph(self, answer: Answer) -> ContextSubgraph:
        """Edge-free nodes for the previous answer's first few entities."""
        out = ContextSubgraph()
        if answer.kind == "entity_set":
            for e in sorted(answer.entities)[:ANSWER_INJECT_CAP]:
                self._add(out, e, "entity", CARRYOVER)
        return out

    # -- merge --------------------------------------------------------------

    def merge(self, graphs: list[ContextSubgraph]) -> ContextSubgraph:
        """Union by element id with dense reindexing.

        `graphs` is ordered oldest turn first; the earliest occurrence of an
        element fixes its class and origin. Over the node cap, carryover
        then type_link nodes are evicted (oldest first); if ent_hop nodes
        alone exceed the cap, MergedGraphTooLarge is raised.
        """
        first_seen: dict[str, tuple[int, SubgraphNode]] = {}
        order: list[str] = []
        for gi, g in enumerate(graphs):
            for n in g.nodes:
                if n.element not in first_seen:
                    first_seen[n.element] = (gi, n)
                    order.append(n.element)

        kept = set(order)
        if len(order) > self.node_cap:
            evictable = sorted(
                (elem for elem in order if first_seen[elem][1].origin != ENT_HOP),
                key=lambda elem: (_EVICTION_ORDER[first_seen[elem][1].origin], first_seen[elem][0]),
            )
            excess = len(order) - self.node_cap
            for elem in evictable[:excess]:
                kept.discard(elem)
            if len(kept) > self.node_cap:
                raise MergedGraphTooLarge(
                    f"{len(kept)} ent_hop nodes exceed the cap of {self.node_cap}"
                )

        out = ContextSubgraph()
        for elem in order:
            if elem in kept:
                n = first_seen[elem][1]
                out.add_node(n.element, n.node_class, n.label_tokens, n.origin)
        for g in graphs:
            for src, dst in g.edges:
                s_elem, d_elem = g.nodes[src].element, g.nodes[dst].element
                si, di = out.node_of(s_elem), out.node_of(d_elem)
                if si is not None and di is not None:
                    out.add_edge(si, di)
        return out


@dataclass
class TurnContext:
    """Sliding window of previous turn graphs plus the previous turn's
    utterance and answer. t_max = 0 disables all context."""

    t_max: int = 5
    window: list[ContextSubgraph] = field(default_factory=list)  # oldest first
    prev_utterance: list[str] = field(default_factory=list)
    prev_answer: Answer | None = None

    def advance(self, turn_graph: ContextSubgraph, utterance_tokens: list[str], answer: Answer) -> None:
        if self.t_max > 0:
            self.window = (self.window + [turn_graph])[-self.t_max :]
        self.prev_utterance = list(utterance_tokens)
        self.prev_answer = answer


def build_turn_graph(
    builder: SubgraphBuilder,
    ctx: TurnContext,
    utterance_tokens: list[str],
    linked_entities: list[str],
    use_type_link: bool = True,
) -> tuple[ContextSubgraph, ContextSubgraph]:
    """Returns (G_t, merged context graph).

    G_t is the current turn's entity/type-link graph and is what enters the
    window; the merged graph additionally unions the window graphs and the
    previous answer's entities. With t_max = 0 the merged graph is exactly
    G_t.
    """
    parts = [builder.entity_subgraph(linked_entities)]
    if use_type_link:
        parts.append(builder.type_link_subgraph(linked_entities, utterance_tokens))
    g_t = builder.merge(parts)
    if ctx.t_max == 0:
        return g_t, g_t
    merge_list = list(ctx.window) + [g_t]
    if ctx.prev_answer is not None:
        carry = builder.answer_subgraph(ctx.prev_answer)
        if len(carry):
            merge_list.append(carry)
    return g_t, builder.merge(merge_list)
