import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from convparse.kg import KnowledgeGraph, Triple
from convparse.linking import (
    LabelMatcher,
    Linker,
    MentionSpan,
    PopularityTable,
    build_popularity,
    entity_lexicon,
    select_spans,
)
from convparse.text import tokenize


def graph_with_labels(labels, triples=None):
    triples = triples or [Triple(e, "P1", "Q_obj") for e in labels if e.startswith("Q")]
    all_labels = dict(labels)
    all_labels.setdefault("Q_obj", "object thing")
    return KnowledgeGraph(triples=triples, labels=all_labels, instance_of="P31")


def test_single_label_match():
    g = graph_with_labels({"Q3298576": "Mathias Kneissl"})
    linker = Linker(g)
    spans = linker.find_mentions(tokenize("Who starred in Mathias Kneissl ?"))
    assert len(spans) == 1
    assert spans[0].surface == "mathias kneissl"
    assert spans[0].candidates == ("Q3298576",)


def test_empty_lexicon_never_matches():
    g = KnowledgeGraph(triples=[], labels={}, instance_of="P31")
    linker = Linker(g)
    assert linker.find_mentions(tokenize("anything at all")) == []


def test_ambiguous_label_keeps_all_candidates():
    g = graph_with_labels({"Q44426": "Rainer Werner Fassbinder", "Q33561976": "Rainer Werner Fassbinder"})
    linker = Linker(g)
    spans = linker.find_mentions(tokenize("films by Rainer Werner Fassbinder"))
    assert len(spans) == 1
    assert set(spans[0].candidates) == {"Q44426", "Q33561976"}


def test_leftmost_longest_non_overlapping():
    g = graph_with_labels({"Q1": "new york", "Q2": "york"})
    linker = Linker(g)
    spans = linker.find_mentions(tokenize("in new york city"))
    assert [(s.start, s.end) for s in spans] == [(1, 3)]
    assert spans[0].candidates == ("Q1",)


def test_token_boundary_anchoring():
    g = graph_with_labels({"Q1": "art"})
    linker = Linker(g)
    assert linker.find_mentions(tokenize("start of the show")) == []
    assert len(linker.find_mentions(tokenize("a work of art indeed"))) == 1


def test_disambiguation_by_popularity_then_id():
    g = graph_with_labels({"Q44426": "fassbinder", "Q33561976": "fassbinder"})
    pop = PopularityTable({"Q44426": 37, "Q33561976": 2})
    linker = Linker(g, popularity=pop)
    (span,) = linker.find_mentions(tokenize("fassbinder"))
    assert linker.disambiguate(span) == "Q44426"
    assert span.candidates == ("Q44426", "Q33561976")
    # all-zero counts: lexicographically smaller id wins
    linker0 = Linker(g)
    (span0,) = linker0.find_mentions(tokenize("fassbinder"))
    assert linker0.disambiguate(span0) == "Q33561976"


def test_single_candidate_returned_directly():
    g = graph_with_labels({"Q9": "lone label"})
    linker = Linker(g)
    (span,) = linker.find_mentions(tokenize("the lone label here"))
    assert linker.disambiguate(span) == "Q9"


def test_rescaling_popularity_does_not_change_argmax():
    g = graph_with_labels({"Qa": "dup", "Qb": "dup"})
    for scale in (1, 3, 100):
        pop = PopularityTable({"Qa": 5 * scale, "Qb": 2 * scale})
        (span,) = Linker(g, popularity=pop).find_mentions(tokenize("dup"))
        assert span.candidates[0] == "Qa"


def test_top_k_forwards_most_popular():
    g = graph_with_labels({"Qa": "dup", "Qb": "dup", "Qc": "dup"})
    pop = PopularityTable({"Qa": 1, "Qb": 9, "Qc": 4})
    linker = Linker(g, popularity=pop, top_k=2)
    _, entities = linker.link(tokenize("dup"))
    assert entities == ["Qb", "Qc"]


def test_build_popularity_counts_gold_parse_occurrences():
    from convparse.sparql import query_entity_ids

    interactions = [
        {"turns": [{"sparql": "SELECT ?x WHERE { wd:Q1 wdt:P5 ?x . }"}, {"sparql": "ASK { wd:Q1 wdt:P5 wd:Q2 . }"}]},
        {"turns": [{"sparql": "SELECT ?x WHERE { wd:Q1 wdt:P5 ?x . ?x wdt:P31 wd:Q9 . }"}]},
    ]
    pop = build_popularity(interactions, query_entity_ids)
    assert pop.get("Q1") == 3
    assert pop.get("Q2") == 1
    assert pop.get("Q9") == 1
    assert pop.get("P5") == 0
    assert pop.get("Qmissing") == 0


def test_build_popularity_empty_and_permutation_invariant():
    from convparse.sparql import query_entity_ids

    assert build_popularity([], query_entity_ids).counts == {}
    a = [{"turns": [{"sparql": "ASK { wd:Q1 wdt:P1 wd:Q2 . }"}]}, {"turns": [{"sparql": "ASK { wd:Q2 wdt:P1 wd:Q3 . }"}]}]
    assert build_popularity(a, query_entity_ids).counts == build_popularity(list(reversed(a)), query_entity_ids).counts


def test_popularity_round_trip(tmp_path):
    pop = PopularityTable({"Q1": 3, "Q2": 0, "Q10": 7})
    path = tmp_path / "pop.tsv"
    pop.save(path)
    assert PopularityTable.load(path).counts == pop.counts


def test_lexicon_excludes_relations_and_pure_types():
    g = KnowledgeGraph(
        triples=[Triple("Q1", "P1", "Q2"), Triple("Q2", "P31", "Q90")],
        labels={"Q1": "alpha", "Q2": "beta", "Q90": "gamma", "P1": "delta"},
        instance_of="P31",
    )
    lex = entity_lexicon(g)
    surfaces = {" ".join(k) for k in lex}
    assert surfaces == {"alpha", "beta"}


# ---------------------------------------------------------------------------
# oracle: per-label substring scan over token windows
# ---------------------------------------------------------------------------


def scan_matches(lexicon, tokens):
    out = []
    for key, ids in lexicon.items():
        n = len(key)
        for i in range(len(tokens) - n + 1):
            if tuple(tokens[i : i + n]) == key:
                out.append((i, i + n, ids))
    return out


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_matcher_agrees_with_substring_scan(seed):
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(12)]
    labels = {}
    for i in range(int(rng.integers(1, 40))):
        length = int(rng.integers(1, 4))
        labels[f"Q{i}"] = " ".join(vocab[rng.integers(len(vocab))] for _ in range(length))
    lexicon = {}
    for eid, label in sorted(labels.items()):
        lexicon.setdefault(tuple(label.split()), []).append(eid)
    lexicon = {k: tuple(v) for k, v in lexicon.items()}
    matcher = LabelMatcher(lexicon)
    for _ in range(16):
        utterance = [vocab[rng.integers(len(vocab))] for _ in range(int(rng.integers(0, 14)))]
        got = matcher.find_all(utterance)
        expected = scan_matches(lexicon, utterance)
        assert sorted(got) == sorted(expected)
        assert select_spans(got) == select_spans(expected)
        # non-overlap invariant
        spans = select_spans(got)
        for a, b in zip(spans, spans[1:]):
            assert a[1] <= b[0]
