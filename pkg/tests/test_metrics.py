import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from convparse.metrics import (
    TurnScore,
    aggregate,
    answer_accuracy,
    exact_match,
    format_report,
    score_turn,
    set_f1,
)
from convparse.sparql import Answer

FIG1_TURN1 = "SELECT ?x WHERE { wd:Q3298576 wdt:P161 ?x . ?x wdt:P31 wd:Q502895 . }"
FIG1_TURN2 = "SELECT ?x WHERE { wd:Q3298576 wdt:P57 ?x . ?x wdt:P31 wd:Q502895 . }"


def ent(*ids):
    return Answer(kind="entity_set", entities=frozenset(ids))


def test_exact_match_reflexive():
    assert exact_match(FIG1_TURN1, FIG1_TURN1) == 1


def test_exact_match_canonicalizes_whitespace():
    doubled = FIG1_TURN1.replace(" ", "  ")
    assert exact_match(doubled, FIG1_TURN1) == 1


def test_exact_match_differs_on_relation():
    assert exact_match(FIG1_TURN1, FIG1_TURN2) == 0


def test_exact_match_unparseable_falls_back_to_string():
    assert exact_match("not sparql at all", "not  sparql all") == 0
    assert exact_match("not sparql at all", "not  sparql at all") == 1


def test_set_f1_half_overlap():
    assert set_f1(ent("a", "b"), ent("b", "c")) == 0.5


def test_set_f1_identity_and_empties():
    assert set_f1(ent("a", "b"), ent("a", "b")) == 1.0
    assert set_f1(ent(), ent()) == 1.0
    assert set_f1(ent(), ent("a")) == 0.0
    assert set_f1(ent("a"), ent()) == 0.0


def test_set_f1_kind_mismatch_scores_zero():
    assert set_f1(Answer(kind="boolean", truth=True), ent("a")) == 0.0


@settings(max_examples=60, deadline=None)
@given(
    pred=st.frozensets(st.sampled_from("abcdefgh"), max_size=6),
    gold=st.frozensets(st.sampled_from("abcdefgh"), max_size=6),
)
def test_set_f1_symmetric_bounded_and_exact_on_equality(pred, gold):
    a = set_f1(ent(*pred), ent(*gold))
    b = set_f1(ent(*gold), ent(*pred))
    assert abs(a - b) < 1e-12
    assert 0.0 <= a <= 1.0
    assert (a == 1.0) == (pred == gold)


def test_answer_accuracy_booleans_and_counts():
    assert answer_accuracy(Answer(kind="boolean", truth=False), Answer(kind="boolean", truth=False)) == 1
    assert answer_accuracy(Answer(kind="count", value=2), Answer(kind="count", value=2)) == 1
    assert answer_accuracy(Answer(kind="count", value=2), Answer(kind="count", value=3)) == 0
    assert answer_accuracy(Answer(kind="count", value=2), Answer(kind="boolean", truth=True)) == 0


def test_score_turn_routes_metric_by_kind():
    s = score_turn("ASK { wd:A wdt:B wd:C . }", Answer(kind="boolean", truth=True), "ASK { wd:A wdt:B wd:C . }", Answer(kind="boolean", truth=True), "Verification (Boolean)", 3)
    assert s.metric_kind == "accuracy" and s.em == 1 and s.score == 1.0
    s2 = score_turn("bad", None, FIG1_TURN1, ent("a"), "Simple Question (Direct)", 1)
    assert s2.unexecutable and s2.score == 0.0 and s2.em == 0


def test_aggregate_single_turn():
    r = aggregate([TurnScore("t", 1, em=1, score=1.0, metric_kind="f1")])
    assert r.overall["em_macro"] == 1.0
    assert r.per_type["t"]["n"] == 1


def test_aggregate_macro_average():
    scores = [
        TurnScore("a", 1, em=1, score=1.0, metric_kind="f1"),
        TurnScore("b", 2, em=0, score=0.0, metric_kind="accuracy"),
    ]
    r = aggregate(scores)
    assert r.overall["em_macro"] == 0.5
    assert r.overall["score_macro"] == 0.5


def test_aggregate_empty_is_safe():
    r = aggregate([])
    assert r.n_turns == 0
    assert r.overall == {}
    format_report(r)


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(0)
    scores = [
        TurnScore(f"t{i % 3}", i % 4 + 1, em=int(rng.random() < 0.5), score=float(rng.random()), metric_kind="f1", phenomena=("ellipsis",) if i % 2 else ())
        for i in range(40)
    ]
    r1 = aggregate(scores)
    shuffled = list(scores)
    rng.shuffle(shuffled)
    r2 = aggregate(shuffled)
    d1, d2 = r1.to_dict(), r2.to_dict()
    assert d1.keys() == d2.keys()
    for qt in d1["per_type"]:
        assert d1["per_type"][qt]["n"] == d2["per_type"][qt]["n"]
        assert abs(d1["per_type"][qt]["em"] - d2["per_type"][qt]["em"]) < 1e-12
        assert abs(d1["per_type"][qt]["score"] - d2["per_type"][qt]["score"]) < 1e-12
    assert abs(d1["overall"]["em_macro"] - d2["overall"]["em_macro"]) < 1e-12


def test_report_slices_positions_and_phenomena():
    scores = [
        TurnScore("t", 1, em=1, score=1.0, metric_kind="f1"),
        TurnScore("t", 2, em=0, score=0.5, metric_kind="f1", phenomena=("coref=-1",)),
        TurnScore("t", 2, em=1, score=1.0, metric_kind="f1", phenomena=("coref=-1", "multi-entity")),
    ]
    r = aggregate(scores)
    assert r.by_position[2]["em"] == 0.5
    assert r.by_phenomenon["coref=-1"]["n"] == 2
    assert "EM by turn position" in format_report(r)
