"""Deterministic synthetic corpus: a mini knowledge graph plus templated
multi-turn interactions with gold queries and executed gold answers.

Question templates cover direct, coreference (distance 1 and beyond),
ellipsis, boolean verification, union, and count turns; a two-hop direct
variant produces parses whose type constraint is only discoverable through
context-dependent type linking. Per-turn metadata records the question
type, discourse phenomena, and coreference distance so evaluation can
slice on them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph, Triple
from .sparql import Answer, Bgp, Iri, QueryAst, TriplePattern, UnionBlock, Var, execute, serialize

INSTANCE_OF = "P31"

QT_DIRECT = "Simple Question (Direct)"
QT_COREF = "Simple Question (Coref)"
QT_ELLIPSIS = "Simple Question (Ellipsis)"
QT_BOOLEAN = "Verification (Boolean)"
QT_LOGICAL = "Logical Reasoning"
QT_COUNT = "Quantitative Reasoning (Count)"


@dataclass
class SynthConfig:
    seed: int = 7
    n_entities: int = 200
    n_relations: int = 10
    n_types: int = 15
    n_interactions: int = 200
    min_turns: int = 4
    max_turns: int = 6
    out_degree: int = 2
    name_words: int = 60  # entity labels are two-word combos from this pool


_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


def _word(rng: np.random.Generator, n_syllables: int) -> str:
    return "".join(_SYLLABLES[rng.integers(len(_SYLLABLES))] for _ in range(n_syllables))


def _unique_words(rng: np.random.Generator, count: int, n_syllables: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    while len(out) < count:
        w = _word(rng, n_syllables)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_kg(cfg: SynthConfig, rng: np.random.Generator) -> KnowledgeGraph:
    taken: set[str] = set()
    type_words = _unique_words(rng, cfg.n_types, 2, taken)
    rel_words = _unique_words(rng, cfg.n_relations, 2, taken)
    # entity labels reuse a small first/last name pool so every name word
    # recurs across many entities; label pairs stay unique
    name_pool = _unique_words(rng, cfg.name_words, 2, taken)

    types = [f"Q{9000 + i}" for i in range(cfg.n_types)]
    relations = [f"P{100 + i}" for i in range(cfg.n_relations)]
    entities = [f"Q{i + 1}" for i in range(cfg.n_entities)]

    labels = {INSTANCE_OF: "instance of"}
    labels.update(dict(zip(types, type_words)))
    labels.update(dict(zip(relations, rel_words)))
    used_pairs: set[tuple[str, str]] = set()
    for e in entities:
        while True:
            pair = (name_pool[int(rng.integers(len(name_pool)))], name_pool[int(rng.integers(len(name_pool)))])
            if pair[0] != pair[1] and pair not in used_pairs:
                used_pairs.add(pair)
                labels[e] = " ".join(pair)
                break

    triples: list[Triple] = []
    seen: set[Triple] = set()

    def put(s, p, o):
        t = Triple(s, p, o)
        if t not in seen:
            seen.add(t)
            triples.append(t)

    for e in entities:
        put(e, INSTANCE_OF, types[int(rng.integers(cfg.n_types))])
    for e in entities:
        for _ in range(1 + int(rng.integers(cfg.out_degree))):
            o = entities[int(rng.integers(cfg.n_entities))]
            if o != e:
                put(e, relations[int(rng.integers(cfg.n_relations))], o)
    return KnowledgeGraph(triples=triples, labels=labels, instance_of=INSTANCE_OF)


# ---------------------------------------------------------------------------
# query construction helpers
# ---------------------------------------------------------------------------


def _sq(entity: str, rel: str, typ: str) -> QueryAst:
    """SELECT ?x WHERE { e r ?x . ?x P31 T . }"""
    return QueryAst(
        "select",
        "x",
        (
            Bgp(
                (
                    TriplePattern(Iri("wd", entity), Iri("wdt", rel), Var("x")),
                    TriplePattern(Var("x"), Iri("wdt", INSTANCE_OF), Iri("wd", typ)),
                )
            ),
        ),
    )


def _sq_in(entity: str, rel: str, typ: str, form: str = "select") -> QueryAst:
    """{select|count} ?x WHERE { ?x r e . ?x P31 T . }"""
    return QueryAst(
        form,
        "x",
        (
            Bgp(
                (
                    TriplePattern(Var("x"), Iri("wdt", rel), Iri("wd", entity)),
                    TriplePattern(Var("x"), Iri("wdt", INSTANCE_OF), Iri("wd", typ)),
                )
            ),
        ),
    )


def _two_hop(entity: str, r1: str, r2: str, typ: str) -> QueryAst:
    return QueryAst(
        "select",
        "x",
        (
            Bgp(
                (
                    TriplePattern(Iri("wd", entity), Iri("wdt", r1), Var("y")),
                    TriplePattern(Var("y"), Iri("wdt", r2), Var("x")),
                    TriplePattern(Var("x"), Iri("wdt", INSTANCE_OF), Iri("wd", typ)),
                )
            ),
        ),
    )


def _union(e1: str, e2: str, rel: str, typ: str) -> QueryAst:
    def branch(e):
        return Bgp(
            (
                TriplePattern(Var("x"), Iri("wdt", rel), Iri("wd", e)),
                TriplePattern(Var("x"), Iri("wdt", INSTANCE_OF), Iri("wd", typ)),
            )
        )

    return QueryAst("select", "x", (UnionBlock((branch(e1), branch(e2))),))


def _ask(s: str, rel: str, o: str) -> QueryAst:
    return QueryAst("ask", None, (Bgp((TriplePattern(Iri("wd", s), Iri("wdt", rel), Iri("wd", o)),)),))


# ---------------------------------------------------------------------------
# interaction generator
# ---------------------------------------------------------------------------


@dataclass
class _Turn:
    utterance: str
    query: QueryAst
    question_type: str
    template: str
    phenomena: tuple[str, ...] = ()
    coref_distance: int | None = None


class _InteractionState:
    def __init__(self):
        self.mentioned: list[tuple[int, str]] = []  # (turn index, entity)
        self.last_select: tuple[str, str] | None = None  # (relation, type) of an out-direction select
        self.last_answer: Answer | None = None
        self.turn = 0


class CorpusGenerator:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.kg = make_kg(cfg, self.rng)
        ids = sorted(self.kg.entity_ids)
        self.entities = [e for e in ids if self.kg.by_subject.get(e)]
        self.label = self.kg.label
        self.type_of = {e: (self.kg.types_of(e) or [None])[0] for e in ids}

    # -- sampling helpers ---------------------------------------------------

    def _pick(self, items):
        return items[int(self.rng.integers(len(items)))]

    def _verb(self) -> str:
        return self._pick(["is", "are"])

    def _out_triple(self, entity: str) -> Triple:
        return self._pick(self.kg.by_subject[entity])

    def _non_instance_out(self, entity: str) -> list[Triple]:
        return [t for t in self.kg.by_subject.get(entity, ()) if t.predicate != INSTANCE_OF]

    # -- templates ----------------------------------------------------------

    def _direct(self, state: _InteractionState) -> _Turn | None:
        for _ in range(20):
            e = self._pick(self.entities)
            outs = self._non_instance_out(e)
            if not outs:
                continue
            t = self._pick(outs)
            typ = self.type_of.get(t.object)
            if typ is None:
                continue
            utter = f"which {self.label(typ)} {self._verb()} the {self.label(t.predicate)} of {self.label(e)} ?"
            state.mentioned.append((state.turn, e))
            state.last_select = (t.predicate, typ)
            return _Turn(utter, _sq(e, t.predicate, typ), QT_DIRECT, "direct")
        return None

    def _two_hop_turn(self, state: _InteractionState) -> _Turn | None:
        for _ in range(30):
            e = self._pick(self.entities)
            hops1 = self._non_instance_out(e)
            if not hops1:
                continue
            t1 = self._pick(hops1)
            if self.type_of.get(t1.object) is None:
                continue
            hops2 = self._non_instance_out(t1.object)
            if not hops2:
                continue
            t2 = self._pick(hops2)
            typ = self.type_of.get(t2.object)
            if typ is None:
                continue
            utter = (
                f"which {self.label(typ)} {self._verb()} the {self.label(t2.predicate)} "
                f"of the {self.label(t1.predicate)} of {self.label(e)} ?"
            )
            state.mentioned.append((state.turn, e))
            state.last_select = None
            return _Turn(utter, _two_hop(e, t1.predicate, t2.predicate, typ), QT_DIRECT, "direct_two_hop")
        return None

    def _coref_referent(self, state: _InteractionState, far: bool) -> tuple[str, int] | None:
        """A previously mentioned entity whose type is unique in context."""
        context_types: dict[str, int] = {}
        candidates = []
        for turn_idx, e in state.mentioned:
            typ = self.type_of.get(e)
            if typ is not None:
                context_types[typ] = context_types.get(typ, 0) + 1
        prev_answer_entities = (
            set(state.last_answer.entities) if state.last_answer and state.last_answer.kind == "entity_set" else set()
        )
        for turn_idx, e in state.mentioned:
            typ = self.type_of.get(e)
            if typ is None or context_types[typ] != 1:
                continue
            distance = state.turn - turn_idx
            if far and (distance < 2 or e in prev_answer_entities):
                continue
            if not far and distance != 1:
                continue
            if not self._non_instance_out(e):
                continue
            candidates.append((e, distance))
        return self._pick(candidates) if candidates else None

    def _coref(self, state: _InteractionState, far: bool) -> _Turn | None:
        picked = self._coref_referent(state, far)
        if picked is None:
            return None
        ref, distance = picked
        outs = self._non_instance_out(ref)
        for _ in range(10):
            t = self._pick(outs)
            typ = self.type_of.get(t.object)
            ref_type = self.type_of[ref]
            # the referring expression "that <ref type>" must not collide
            # with the answer-type constraint
            if typ is None or typ == ref_type:
                continue
            utter = (
                f"and which {self.label(typ)} {self._verb()} the {self.label(t.predicate)} "
                f"of that {self.label(ref_type)} ?"
            )
            state.last_select = (t.predicate, typ)
            tag = "coref<-1" if distance > 1 else "coref=-1"
            return _Turn(
                utter,
                _sq(ref, t.predicate, typ),
                QT_COREF,
                "coref_far" if distance > 1 else "coref_near",
                phenomena=(tag,),
                coref_distance=-distance,
            )
        return None

    def _ellipsis(self, state: _InteractionState) -> _Turn | None:
        if state.last_select is None:
            return None
        rel, typ = state.last_select
        for _ in range(20):
            e2 = self._pick(self.entities)
            if any(e2 == e for _, e in state.mentioned):
                continue
            objs = self.kg.by_sp.get((e2, rel), ())
            if not objs:
                continue
            utter = f"and how about {self.label(e2)} ?"
            state.mentioned.append((state.turn, e2))
            return _Turn(utter, _sq(e2, rel, typ), QT_ELLIPSIS, "ellipsis", phenomena=("ellipsis",))
        return None

    def _boolean(self, state: _InteractionState) -> _Turn | None:
        # answer-coref variant: verify the unique previous answer entity
        prev = state.last_answer
        if (
            prev is not None
            and prev.kind == "entity_set"
            and len(prev.entities) == 1
            and self.rng.random() < 0.5
        ):
            ref = next(iter(prev.entities))
            ref_type = self.type_of.get(ref)
            if ref_type is not None:
                for _ in range(10):
                    e = self._pick(self.entities)
                    outs = self._non_instance_out(e)
                    if not outs or e == ref:
                        continue
                    rel = self._pick(outs).predicate
                    utter = f"{self._verb()} that {self.label(ref_type)} the {self.label(rel)} of {self.label(e)} ?"
                    state.mentioned.append((state.turn, e))
                    return _Turn(
                        utter,
                        _ask(e, rel, ref),
                        QT_BOOLEAN,
                        "boolean_coref",
                        phenomena=("coref=-1",),
                        coref_distance=-1,
                    )
        for _ in range(20):
            e = self._pick(self.entities)
            outs = self._non_instance_out(e)
            if not outs:
                continue
            t = self._pick(outs)
            if self.rng.random() < 0.5:
                o = t.object  # true fact
            else:
                o = self._pick(self.entities)
            if o == e:
                continue
            utter = f"does {self.label(e)} have {self.label(o)} as {self.label(t.predicate)} ?"
            state.mentioned.append((state.turn, e))
            state.mentioned.append((state.turn, o))
            return _Turn(utter, _ask(e, t.predicate, o), QT_BOOLEAN, "boolean", phenomena=("multi-entity",))
        return None

    def _incoming(self, state: _InteractionState) -> tuple[str, str, str] | None:
        """(object entity, relation, subject type) with a real incoming edge."""
        for _ in range(20):
            e = self._pick(self.entities)
            ins = [t for t in self.kg.by_object.get(e, ()) if t.predicate != INSTANCE_OF]
            if not ins:
                continue
            t = self._pick(ins)
            typ = self.type_of.get(t.subject)
            if typ is None:
                continue
            return e, t.predicate, typ
        return None

    def _logical(self, state: _InteractionState) -> _Turn | None:
        base = self._incoming(state)
        if base is None:
            return None
        e1, rel, typ = base
        for _ in range(20):
            t2 = self._pick(self.kg.by_predicate.get(rel, ()))
            e2 = t2.object
            if e2 in (e1,) or self.type_of.get(t2.subject) != typ or not self.kg.has_label(e2):
                continue
            utter = (
                f"which {self.label(typ)} have {self.label(e1)} or {self.label(e2)} "
                f"as {self.label(rel)} ?"
            )
            state.mentioned.append((state.turn, e1))
            state.mentioned.append((state.turn, e2))
            state.last_select = None
            return _Turn(utter, _union(e1, e2, rel, typ), QT_LOGICAL, "logical", phenomena=("multi-entity",))
        return None

    def _count(self, state: _InteractionState) -> _Turn | None:
        base = self._incoming(state)
        if base is None:
            return None
        e, rel, typ = base
        utter = f"how many {self.label(typ)} have {self.label(e)} as {self.label(rel)} ?"
        state.mentioned.append((state.turn, e))
        state.last_select = None
        return _Turn(utter, _sq_in(e, rel, typ, form="count"), QT_COUNT, "count")

    def _direct_in(self, state: _InteractionState) -> _Turn | None:
        """Direct question over an incoming edge (answers are subjects)."""
        base = self._incoming(state)
        if base is None:
            return None
        e, rel, typ = base
        utter = f"which {self.label(typ)} have {self.label(e)} as {self.label(rel)} ?"
        state.mentioned.append((state.turn, e))
        state.last_select = None
        return _Turn(utter, _sq_in(e, rel, typ), QT_DIRECT, "direct_in")

    # -- interaction assembly -------------------------------------------------

    def _followup(self, state: _InteractionState) -> _Turn:
        roll = float(self.rng.random())
        allow_far = state.turn >= 2
        makers = []
        if roll < 0.19:
            far = allow_far and self.rng.random() < 0.35
            makers = [lambda: self._coref(state, far), lambda: self._coref(state, False)]
        elif roll < 0.33:
            makers = [lambda: self._ellipsis(state)]
        elif roll < 0.49:
            makers = [lambda: self._boolean(state)]
        elif roll < 0.61:
            makers = [lambda: self._count(state)]
        elif roll < 0.74:
            makers = [lambda: self._logical(state)]
        elif roll < 0.83:
            makers = [lambda: self._two_hop_turn(state)]
        elif roll < 0.92:
            makers = [lambda: self._direct_in(state)]
        makers.append(lambda: self._direct(state))
        for make in makers:
            turn = make()
            if turn is not None:
                return turn
        raise RuntimeError("direct template must always succeed on this graph")

    def interaction(self, index: int) -> dict:
        state = _InteractionState()
        n_turns = int(self.rng.integers(self.cfg.min_turns, self.cfg.max_turns + 1))
        turns = []
        for i in range(n_turns):
            state.turn = i
            if i == 0:
                turn = self._two_hop_turn(state) if self.rng.random() < 0.3 else self._direct(state)
                if turn is None:
                    turn = self._direct(state)
            else:
                turn = self._followup(state)
            answer = execute(self.kg, turn.query)
            state.last_answer = answer
            has_type = any(tok.startswith("wdt:" + INSTANCE_OF) for tok in serialize(turn.query).split())
            turns.append(
                {
                    "utterance": turn.utterance,
                    "sparql": serialize(turn.query),
                    "answer": answer.to_dict(),
                    "question_type": turn.question_type,
                    "template": turn.template,
                    "phenomena": list(turn.phenomena),
                    "coref_distance": turn.coref_distance,
                    "has_type_constraint": has_type,
                }
            )
        return {"id": f"inter_{index:05d}", "turns": turns}

    def corpus(self) -> list[dict]:
        return [self.interaction(i) for i in range(self.cfg.n_interactions)]


def make_synthetic_corpus(cfg: SynthConfig) -> tuple[KnowledgeGraph, list[dict]]:
    gen = CorpusGenerator(cfg)
    return gen.kg, gen.corpus()


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def save_interactions(interactions: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inter in interactions:
            fh.write(json.dumps(inter, ensure_ascii=False, sort_keys=True) + "\n")


def load_interactions(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
