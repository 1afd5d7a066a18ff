import numpy as np
import pytest

from convparse.kg import KnowledgeGraph, Triple

INSTANCE_OF = "P31"


def make_random_graph(rng: np.random.Generator, n_entities=30, n_relations=5, n_types=4, n_triples=80) -> KnowledgeGraph:
    """Random KG with entity/relation/type id pools and instance-of triples."""
    entities = [f"Q{i}" for i in range(n_entities)]
    relations = [f"P{i + 100}" for i in range(n_relations)]
    types = [f"Q{9000 + i}" for i in range(n_types)]
    triples = []
    seen = set()
    for _ in range(n_triples):
        t = Triple(
            entities[rng.integers(n_entities)],
            relations[rng.integers(n_relations)],
            entities[rng.integers(n_entities)],
        )
        if t not in seen:
            triples.append(t)
            seen.add(t)
    for e in entities:
        if rng.random() < 0.8:
            t = Triple(e, INSTANCE_OF, types[rng.integers(n_types)])
            if t not in seen:
                triples.append(t)
                seen.add(t)
    labels = {e: f"entity {i}" for i, e in enumerate(entities)}
    labels.update({r: f"relation {i}" for i, r in enumerate(relations)})
    labels.update({t: f"kind {i}" for i, t in enumerate(types)})
    return KnowledgeGraph(triples=triples, labels=labels, instance_of=INSTANCE_OF)


@pytest.fixture
def fig1_graph() -> KnowledgeGraph:
    """Tiny graph shaped like the four-turn film interaction."""
    triples = [
        Triple("Q3298576", "P161", "Q44426"),
        Triple("Q3298576", "P161", "Q460664"),
        Triple("Q3298576", "P161", "Q61597"),
        Triple("Q3298576", "P57", "Q76025"),
        Triple("Q76025", "P161", "Q24807818"),
        Triple("Q24807818", "P31", "Q11424"),
        Triple("Q3298576", "P31", "Q11424"),
        Triple("Q44426", "P31", "Q502895"),
        Triple("Q460664", "P31", "Q502895"),
        Triple("Q61597", "P31", "Q502895"),
        Triple("Q76025", "P31", "Q502895"),
        Triple("Q1371145", "P58", "Q44426"),
        Triple("Q1371145", "P31", "Q838948"),
    ]
    labels = {
        "Q3298576": "Mathias Kneissl",
        "Q76025": "Reinhard Hauff",
        "Q24807818": "Dubashi",
        "Q44426": "Rainer Werner Fassbinder",
        "Q460664": "Volker Schlöndorff",
        "Q61597": "Hanna Schygulla",
        "Q230586": "Laura Esquivel",
        "Q838948": "work of art",
        "Q502895": "common name",
        "Q11424": "film",
        "Q1371145": "The American Soldier",
        "P161": "cast member",
        "P31": "instance of",
        "P57": "director",
        "P58": "screenwriter",
    }
    return KnowledgeGraph(triples=triples, labels=labels, instance_of="P31")
