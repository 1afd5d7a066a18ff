"""Scoring: exact match, set F1, answer accuracy, and sliced aggregation.

Entity-set question types are scored with F1, verification and count types
with execution answer accuracy. The overall row is a macro average over
question types; per-type rows are micro within the type.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .sparql import Answer, SparqlSyntaxError, UnsupportedConstruct, parse_sparql, serialize

ACCURACY_KINDS = ("boolean", "count")


def canonicalize(query_text: str) -> tuple[str, bool]:
    """(canonical form, parseable). Unparseable text falls back to
    whitespace normalization."""
    try:
        return serialize(parse_sparql(query_text)), True
    except (SparqlSyntaxError, UnsupportedConstruct, ValueError):
        return " ".join(query_text.split()), False


def exact_match(pred: str, gold: str) -> int:
    return int(canonicalize(pred)[0] == canonicalize(gold)[0])


def set_f1(pred: Answer, gold: Answer) -> float:
    """Harmonic mean of set precision/recall; two empty sets score 1."""
    if pred.kind != "entity_set" or gold.kind != "entity_set":
        return 0.0
    p, g = set(pred.entities), set(gold.entities)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    overlap = len(p & g)
    if overlap == 0:
        return 0.0
    precision = overlap / len(p)
    recall = overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def answer_accuracy(pred: Answer, gold: Answer) -> int:
    if pred.kind != gold.kind:
        return 0
    if gold.kind == "boolean":
        return int(pred.truth == gold.truth)
    if gold.kind == "count":
        return int(pred.value == gold.value)
    return 0


@dataclass
class TurnScore:
    question_type: str
    turn_position: int
    em: int
    score: float  # F1 or accuracy depending on metric_kind
    metric_kind: str  # f1 | accuracy
    phenomena: tuple[str, ...] = ()
    unexecutable: bool = False
    unreachable: bool = False


def score_turn(
    pred_query: str,
    pred_answer: Answer | None,
    gold_query: str,
    gold_answer: Answer,
    question_type: str,
    turn_position: int,
    phenomena: tuple[str, ...] = (),
    unreachable: bool = False,
) -> TurnScore:
    """pred_answer None marks an unexecutable prediction (zero credit)."""
    em = exact_match(pred_query, gold_query)
    metric_kind = "accuracy" if gold_answer.kind in ACCURACY_KINDS else "f1"
    if pred_answer is None:
        score = 0.0
    elif metric_kind == "accuracy":
        score = float(answer_accuracy(pred_answer, gold_answer))
    else:
        score = set_f1(pred_answer, gold_answer)
    return TurnScore(
        question_type=question_type,
        turn_position=turn_position,
        em=em,
        score=score,
        metric_kind=metric_kind,
        phenomena=phenomena,
        unexecutable=pred_answer is None,
        unreachable=unreachable,
    )


@dataclass
class Report:
    per_type: dict[str, dict] = field(default_factory=dict)
    overall: dict = field(default_factory=dict)
    by_position: dict[int, dict] = field(default_factory=dict)
    by_phenomenon: dict[str, dict] = field(default_factory=dict)
    unexecutable_rate: float = 0.0
    unreachable_rate: float = 0.0
    n_turns: int = 0

    def to_dict(self) -> dict:
        return {
            "per_type": self.per_type,
            "overall": self.overall,
            "by_position": {str(k): v for k, v in self.by_position.items()},
            "by_phenomenon": self.by_phenomenon,
            "unexecutable_rate": self.unexecutable_rate,
            "unreachable_rate": self.unreachable_rate,
            "n_turns": self.n_turns,
        }


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def aggregate(scores: list[TurnScore]) -> Report:
    report = Report(n_turns=len(scores))
    if not scores:
        return report
    types = sorted({s.question_type for s in scores})
    for qt in types:
        rows = [s for s in scores if s.question_type == qt]
        report.per_type[qt] = {
            "n": len(rows),
            "em": _mean(r.em for r in rows),
            "score": _mean(r.score for r in rows),
            "metric": rows[0].metric_kind,
        }
    report.overall = {
        "em_macro": _mean(report.per_type[qt]["em"] for qt in types),
        "score_macro": _mean(report.per_type[qt]["score"] for qt in types),
        "em_micro": _mean(s.em for s in scores),
    }
    for pos in sorted({s.turn_position for s in scores}):
        rows = [s for s in scores if s.turn_position == pos]
        report.by_position[pos] = {"n": len(rows), "em": _mean(r.em for r in rows)}
    tags = sorted({t for s in scores for t in s.phenomena})
    for tag in tags:
        rows = [s for s in scores if tag in s.phenomena]
        report.by_phenomenon[tag] = {"n": len(rows), "em": _mean(r.em for r in rows)}
    report.unexecutable_rate = _mean(float(s.unexecutable) for s in scores)
    report.unreachable_rate = _mean(float(s.unreachable) for s in scores)
    return report


def format_report(report: Report) -> str:
    """Human-readable table."""
    lines = []
    lines.append(f"{'Question Type':38s} {'N':>5s} {'EM':>7s} {'F1/AC':>7s}")
    for qt, row in report.per_type.items():
        lines.append(f"{qt:38s} {row['n']:5d} {100 * row['em']:7.2f} {100 * row['score']:7.2f}")
    if report.overall:
        lines.append(
            f"{'Overall (macro)':38s} {report.n_turns:5d} "
            f"{100 * report.overall['em_macro']:7.2f} {100 * report.overall['score_macro']:7.2f}"
        )
    if report.by_position:
        lines.append("")
        lines.append("EM by turn position: " + "  ".join(f"{p}:{100 * row['em']:.1f}" for p, row in report.by_position.items()))
    if report.by_phenomenon:
        lines.append("EM by phenomenon:    " + "  ".join(f"{t}:{100 * row['em']:.1f}" for t, row in report.by_phenomenon.items()))
    lines.append(f"unexecutable: {100 * report.unexecutable_rate:.2f}%   unreachable: {100 * report.unreachable_rate:.2f}%")
    return "\n".join(lines)
