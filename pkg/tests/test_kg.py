import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convparse.kg import GraphLoadError, KnowledgeGraph, Triple, dump_graph, load_graph

from conftest import INSTANCE_OF, make_random_graph


def write_graph_files(tmp_path, rows, labels):
    tf = tmp_path / "triples.tsv"
    lf = tmp_path / "labels.tsv"
    tf.write_text("".join(f"{s}\t{p}\t{o}\n" for s, p, o in rows), encoding="utf-8")
    lf.write_text("".join(f"{i}\t{l}\n" for i, l in labels.items()), encoding="utf-8")
    return tf, lf


def test_load_single_row(tmp_path):
    tf, lf = write_graph_files(tmp_path, [("Q76025", "P161", "Q24807818")], {"Q76025": "Reinhard Hauff"})
    g = load_graph(tf, lf, "P31")
    assert len(g.triples) == 1
    assert g.by_subject["Q76025"] == [Triple("Q76025", "P161", "Q24807818")]


def test_load_empty_file(tmp_path):
    tf, lf = write_graph_files(tmp_path, [], {})
    g = load_graph(tf, lf, "P31")
    assert g.triples == []
    assert g.match(None, None, None) == []
    assert g.neighborhood("Q1") == []


def test_load_skips_comments_and_blank_lines(tmp_path):
    tf = tmp_path / "t.tsv"
    tf.write_text("# header\nQ1\tP1\tQ2\n\nQ1\tP1\tQ2\n", encoding="utf-8")
    lf = tmp_path / "l.tsv"
    lf.write_text("Q1\tone\n", encoding="utf-8")
    g = load_graph(tf, lf, "P31")
    # duplicate row deduplicated
    assert len(g.triples) == 1


def test_malformed_row_reports_line_number(tmp_path):
    tf = tmp_path / "t.tsv"
    tf.write_text("Q1\tP1\tQ2\nQ1\tP1\n", encoding="utf-8")
    lf = tmp_path / "l.tsv"
    lf.write_text("", encoding="utf-8")
    with pytest.raises(GraphLoadError, match=":2"):
        load_graph(tf, lf, "P31")


def test_unlabeled_id_gets_placeholder(tmp_path):
    tf, lf = write_graph_files(tmp_path, [("Q1", "P1", "Q2")], {"Q1": "one"})
    g = load_graph(tf, lf, "P31")
    assert g.label("Q2") == "⟨unlabeled:Q2⟩"
    assert not g.has_label("Q2")


def test_neighborhood_fig1(fig1_graph):
    hood = fig1_graph.neighborhood("Q76025")
    assert Triple("Q76025", "P161", "Q24807818") in hood
    assert all(t.subject == "Q76025" or t.object == "Q76025" for t in hood)


def test_neighborhood_unknown_id(fig1_graph):
    assert fig1_graph.neighborhood("Q999999") == []


def test_types_of(fig1_graph):
    assert fig1_graph.types_of("Q24807818") == ["Q11424"]
    assert fig1_graph.types_of("P161") == []
    assert fig1_graph.types_of("Q404") == []


def test_types_of_country_style_fixture():
    g = KnowledgeGraph(
        triples=[Triple("Q_dub", "P495", "Q_india"), Triple("Q_india", "P31", "Q6256")],
        labels={"Q_dub": "Dubashi", "Q_india": "India", "Q6256": "country", "P495": "country of origin"},
        instance_of="P31",
    )
    assert g.types_of("Q_india") == ["Q6256"]


def scan_match(triples, s, p, o):
    return [t for t in triples if (s is None or t.subject == s) and (p is None or t.predicate == p) and (o is None or t.object == o)]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_triples=st.integers(0, 400))
def test_index_lookups_equal_linear_scan(seed, n_triples):
    rng = np.random.default_rng(seed)
    g = make_random_graph(rng, n_triples=n_triples)
    ids = [f"Q{i}" for i in range(30)] + ["P100", "P101", INSTANCE_OF, "Qmissing"]
    for _ in range(25):
        s = ids[rng.integers(len(ids))] if rng.random() < 0.5 else None
        p = ids[rng.integers(len(ids))] if rng.random() < 0.5 else None
        o = ids[rng.integers(len(ids))] if rng.random() < 0.5 else None
        assert sorted(g.match(s, p, o)) == sorted(scan_match(g.triples, s, p, o))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_neighborhood_equals_scan_filter(seed):
    rng = np.random.default_rng(seed)
    g = make_random_graph(rng, n_triples=500, n_entities=40)
    e = f"Q{rng.integers(45)}"
    expected = [t for t in g.triples if t.subject == e or t.object == e]
    got = g.neighborhood(e)
    assert sorted(got) == sorted(expected)
    assert len(got) == len(set(got))
    assert set(got) <= set(g.triples)


def test_sp_index_matches_scan_on_1000_random_triples():
    rng = np.random.default_rng(42)
    g = make_random_graph(rng, n_entities=50, n_relations=8, n_triples=1000)
    for t in g.triples:
        assert sorted(g.by_sp[(t.subject, t.predicate)]) == sorted(
            x.object for x in scan_match(g.triples, t.subject, t.predicate, None)
        )


def test_load_dump_load_fixed_point(tmp_path):
    rng = np.random.default_rng(3)
    g = make_random_graph(rng, n_triples=120)
    t1, l1 = tmp_path / "a.tsv", tmp_path / "al.tsv"
    dump_graph(g, t1, l1)
    g2 = load_graph(t1, l1, INSTANCE_OF)
    t2, l2 = tmp_path / "b.tsv", tmp_path / "bl.tsv"
    dump_graph(g2, t2, l2)
    assert t1.read_text() == t2.read_text()
    assert l1.read_text() == l2.read_text()
    assert g2.triples == g.triples
    assert g2.labels == g.labels


def test_stats_counts(fig1_graph):
    s = fig1_graph.stats()
    assert s["triples"] == len(fig1_graph.triples)
    assert s["relations"] == 4
    assert "Q502895" in fig1_graph.type_ids
    assert s["entities"] == 7
