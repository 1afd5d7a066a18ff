"""Parser, executor, and canonical serializer for the SPARQL subset used in
the conversations: SELECT / ASK / COUNT over basic graph patterns with UNION.

Query text follows the dataset surface form: `wd:` entity prefix, `wdt:`
relation prefix, `?x` variables, `.`-terminated triple patterns.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Union

from .kg import KnowledgeGraph

UNSUPPORTED_KEYWORDS = {
    "FILTER", "OPTIONAL", "ORDER", "GROUP", "LIMIT", "OFFSET", "HAVING",
    "MINUS", "VALUES", "BIND", "SERVICE", "GRAPH", "CONSTRUCT", "DESCRIBE",
}


class SparqlSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedConstruct(ValueError):
    def __init__(self, construct: str):
        super().__init__(f"unsupported construct: {construct}")
        self.construct = construct


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str  # without the leading '?'


@dataclass(frozen=True)
class Iri:
    prefix: str  # wd | wdt
    id: str


Term = Union[Var, Iri]


@dataclass(frozen=True)
class TriplePattern:
    subject: Term
    predicate: Term
    object: Term

    def terms(self) -> tuple[Term, Term, Term]:
        return (self.subject, self.predicate, self.object)


@dataclass(frozen=True)
class Bgp:
    patterns: tuple[TriplePattern, ...]


@dataclass(frozen=True)
class UnionBlock:
    branches: tuple["Block", ...]


Block = Union[Bgp, UnionBlock]


@dataclass(frozen=True)
class QueryAst:
    form: str  # select | ask | count
    projection: str | None  # variable name for select/count
    where: tuple[Block, ...]
    distinct: bool = False

    def validate(self) -> None:
        if self.form in ("select", "count"):
            if not self.projection:
                raise ValueError("select/count queries require a projected variable")
            if self.projection not in _block_vars(self.where):
                raise ValueError(f"projected variable ?{self.projection} does not occur in the pattern")
        for block in self.where:
            _validate_block(block)
        if not self.where:
            raise ValueError("empty where clause")


def _validate_block(block: Block) -> None:
    if isinstance(block, Bgp):
        if not block.patterns:
            raise ValueError("empty pattern block")
    else:
        if not block.branches:
            raise ValueError("empty union")
        for b in block.branches:
            _validate_block(b)


def _block_vars(blocks: tuple[Block, ...]) -> set[str]:
    out: set[str] = set()
    for block in blocks:
        if isinstance(block, Bgp):
            for p in block.patterns:
                out.update(t.name for t in p.terms() if isinstance(t, Var))
        else:
            for b in block.branches:
                out |= _block_vars((b,))
    return out


@dataclass(frozen=True)
class Answer:
    kind: str  # entity_set | boolean | count
    entities: frozenset[str] = frozenset()
    truth: bool = False
    value: int = 0

    def to_dict(self, labeler=None) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "entity_set":
            ids = sorted(self.entities)
            d["entities"] = ids
            if labeler is not None:
                d["labels"] = [labeler(e) for e in ids]
        elif self.kind == "boolean":
            d["truth"] = self.truth
        else:
            d["value"] = self.value
        return d

    @staticmethod
    def from_dict(d: dict) -> "Answer":
        kind = d["kind"]
        if kind == "entity_set":
            return Answer(kind="entity_set", entities=frozenset(d["entities"]))
        if kind == "boolean":
            return Answer(kind="boolean", truth=bool(d["truth"]))
        return Answer(kind="count", value=int(d["value"]))


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[{}().]|[^\s{}().]+")


def tokenize_query(text: str) -> list[tuple[str, int]]:
    """Tokens with byte offsets; braces, parens, and dots are standalone."""
    out = []
    for m in _TOKEN_RE.finditer(text):
        out.append((m.group(0), len(text[: m.start()].encode("utf-8"))))
    return out


class _Cursor:
    def __init__(self, tokens: list[tuple[str, int]], text_len: int):
        self.tokens = tokens
        self.pos = 0
        self.text_len = text_len

    def peek(self) -> str | None:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def offset(self) -> int:
        return self.tokens[self.pos][1] if self.pos < len(self.tokens) else self.text_len

    def next(self) -> str:
        tok = self.peek()
        if tok is None:
            raise SparqlSyntaxError("unexpected end of query", self.offset())
        self.pos += 1
        return tok

    def expect(self, want: str) -> None:
        tok = self.peek()
        if tok is None or tok.upper() != want.upper() and tok != want:
            raise SparqlSyntaxError(f"expected {want!r}, found {tok!r}", self.offset())
        self.pos += 1


def _check_supported(tok: str, offset: int) -> None:
    if tok.upper() in UNSUPPORTED_KEYWORDS:
        raise UnsupportedConstruct(tok.upper())


def _parse_term(cur: _Cursor) -> Term:
    off = cur.offset()
    tok = cur.next()
    _check_supported(tok, off)
    if tok.startswith("?"):
        if len(tok) < 2:
            raise SparqlSyntaxError("empty variable name", off)
        return Var(tok[1:])
    if tok.startswith("wd:") and len(tok) > 3:
        return Iri("wd", tok[3:])
    if tok.startswith("wdt:") and len(tok) > 4:
        return Iri("wdt", tok[4:])
    raise SparqlSyntaxError(f"expected a term, found {tok!r}", off)


def _parse_triples(cur: _Cursor) -> list[TriplePattern]:
    patterns = []
    while cur.peek() not in (None, "}", "{", "UNION"):
        s = _parse_term(cur)
        p = _parse_term(cur)
        o = _parse_term(cur)
        cur.expect(".")
        patterns.append(TriplePattern(s, p, o))
    return patterns


def _parse_group(cur: _Cursor) -> Block:
    """Parse the contents between '{' and '}'."""
    cur.expect("{")
    if cur.peek() == "{":
        branches = [_parse_group(cur)]
        while cur.peek() is not None and cur.peek().upper() == "UNION":
            cur.next()
            branches.append(_parse_group(cur))
        cur.expect("}")
        if len(branches) == 1:
            return branches[0]
        return UnionBlock(tuple(branches))
    off = cur.offset()
    tok = cur.peek()
    if tok is not None:
        _check_supported(tok, off)
    patterns = _parse_triples(cur)
    if not patterns:
        raise SparqlSyntaxError("empty pattern block", cur.offset())
    cur.expect("}")
    return Bgp(tuple(patterns))


def parse_sparql(text: str) -> QueryAst:
    tokens = tokenize_query(text)
    cur = _Cursor(tokens, len(text.encode("utf-8")))
    off = cur.offset()
    head = cur.next().upper()
    _check_supported(head, off)

    if head == "ASK":
        where = _parse_group(cur)
        q = QueryAst(form="ask", projection=None, where=(where,))
    elif head == "SELECT":
        distinct = False
        form = "select"
        projection: str
        if cur.peek() is not None and cur.peek().upper() == "DISTINCT":
            cur.next()
            distinct = True
        if cur.peek() == "(":
            cur.next()
            kw_off = cur.offset()
            kw = cur.next()
            if kw.upper() != "COUNT":
                _check_supported(kw, kw_off)
                raise SparqlSyntaxError(f"expected COUNT, found {kw!r}", kw_off)
            form = "count"
            cur.expect("(")
            var = _parse_term(cur)
            if not isinstance(var, Var):
                raise SparqlSyntaxError("COUNT expects a variable", kw_off)
            projection = var.name
            cur.expect(")")
            cur.expect("AS")
            cur.next()  # output alias, conventionally ?count
            cur.expect(")")
        else:
            var = _parse_term(cur)
            if not isinstance(var, Var):
                raise SparqlSyntaxError("SELECT expects a variable projection", off)
            projection = var.name
        cur.expect("WHERE")
        where = _parse_group(cur)
        q = QueryAst(form=form, projection=projection, where=(where,), distinct=distinct)
    else:
        raise SparqlSyntaxError(f"expected SELECT or ASK, found {head!r}", off)

    if cur.peek() is not None:
        raise SparqlSyntaxError(f"trailing input {cur.peek()!r}", cur.offset())
    q.validate()
    return q


# ---------------------------------------------------------------------------
# serializer
# ---------------------------------------------------------------------------


def term_tokens(term: Term) -> list[str]:
    if isinstance(term, Var):
        return [f"?{term.name}"]
    return [f"{term.prefix}:{term.id}"]


def _block_tokens(block: Block, outer: bool) -> list[str]:
    if isinstance(block, Bgp):
        toks = ["{"]
        for p in block.patterns:
            toks += term_tokens(p.subject) + term_tokens(p.predicate) + term_tokens(p.object) + ["."]
        toks.append("}")
        return toks
    inner: list[str] = []
    for i, b in enumerate(block.branches):
        if i:
            inner.append("UNION")
        inner += _block_tokens(b, outer=False)
    if outer:
        return ["{"] + inner + ["}"]
    return inner


def query_tokens(q: QueryAst) -> list[str]:
    """Canonical token stream; joined with single spaces by serialize()."""
    q.validate()
    if q.form == "ask":
        toks = ["ASK"]
    elif q.form == "count":
        toks = ["SELECT", "(", "COUNT", "(", f"?{q.projection}", ")", "AS", "?count", ")", "WHERE"]
    else:
        toks = ["SELECT"]
        if q.distinct:
            toks.append("DISTINCT")
        toks += [f"?{q.projection}", "WHERE"]
    for block in q.where:
        toks += _block_tokens(block, outer=True)
    return toks


def serialize(q: QueryAst) -> str:
    return " ".join(query_tokens(q))


# ---------------------------------------------------------------------------
# executor
# ---------------------------------------------------------------------------

Binding = dict[str, str]


def _resolve(term: Term, binding: Binding) -> str | None:
    if isinstance(term, Iri):
        return term.id
    return binding.get(term.name)


def _pattern_solutions(g: KnowledgeGraph, p: TriplePattern, binding: Binding) -> Iterator[Binding]:
    s, pr, o = (_resolve(t, binding) for t in p.terms())
    for t in g.match(s, pr, o):
        new = dict(binding)
        ok = True
        for term, value in zip(p.terms(), t):
            if isinstance(term, Var):
                bound = new.get(term.name)
                if bound is None:
                    new[term.name] = value
                elif bound != value:
                    ok = False
                    break
        if ok:
            yield new


def _bound_count(p: TriplePattern, binding: Binding) -> int:
    return sum(1 for t in p.terms() if _resolve(t, binding) is not None)


def _bgp_solutions(g: KnowledgeGraph, patterns: list[TriplePattern], binding: Binding) -> Iterator[Binding]:
    if not patterns:
        yield binding
        return
    # most-bound-pattern-first; ties keep input order
    best = max(range(len(patterns)), key=lambda i: (_bound_count(patterns[i], binding), -i))
    rest = patterns[:best] + patterns[best + 1 :]
    for b in _pattern_solutions(g, patterns[best], binding):
        yield from _bgp_solutions(g, rest, b)


def _blocks_solutions(g: KnowledgeGraph, blocks: list[Block], binding: Binding) -> Iterator[Binding]:
    if not blocks:
        yield binding
        return
    head, rest = blocks[0], blocks[1:]
    if isinstance(head, Bgp):
        for b in _bgp_solutions(g, list(head.patterns), binding):
            yield from _blocks_solutions(g, rest, b)
    else:
        for branch in head.branches:
            yield from _blocks_solutions(g, [branch] + rest, binding)


def _block_terms(block: Block) -> Iterator[Term]:
    if isinstance(block, Bgp):
        for p in block.patterns:
            yield from p.terms()
    else:
        for b in block.branches:
            yield from _block_terms(b)


def query_entity_ids(text: str) -> list[str]:
    """wd:-prefixed ids of a query string, in order, with multiplicity.

    Used for popularity counting; unparseable text yields no ids.
    """
    try:
        q = parse_sparql(text)
    except (SparqlSyntaxError, UnsupportedConstruct, ValueError):
        return []
    out = []
    for block in q.where:
        for term in _block_terms(block):
            if isinstance(term, Iri) and term.prefix == "wd":
                out.append(term.id)
    return out


def execute(g: KnowledgeGraph, q: QueryAst) -> Answer:
    """Evaluate q over g with set semantics.

    Unknown ids in patterns simply match nothing. COUNT reports the number
    of distinct bindings of the projected variable.
    """
    q.validate()
    if q.form == "ask":
        for _ in _blocks_solutions(g, list(q.where), {}):
            return Answer(kind="boolean", truth=True)
        return Answer(kind="boolean", truth=False)
    values = {b[q.projection] for b in _blocks_solutions(g, list(q.where), {}) if q.projection in b}
    if q.form == "count":
        return Answer(kind="count", value=len(values))
    return Answer(kind="entity_set", entities=frozenset(values))
