"""The per-turn pipeline and session management.

One turn: link entity mentions, build the merged context subgraph, encode
utterance and graph, greedily decode a query, execute it, and advance the
session's sliding window. Sessions own their context; the engine's model
and graph are shared read-only.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field

from .inference import FastInference
from .kg import KnowledgeGraph
from .linking import Linker
from .metrics import canonicalize
from .model import ModelParams, batch_graphs, compose_input, composed_features, realize_tokens, truncate_input
from .sparql import Answer, SparqlSyntaxError, UnsupportedConstruct, execute, parse_sparql
from .subgraph import ContextSubgraph, SubgraphBuilder, TurnContext, build_turn_graph
from .text import tokenize
from .vocab import OutputToken, Vocab


class EmptyUtterance(ValueError):
    pass


@dataclass
class TurnRecord:
    utterance: str
    sparql: str
    answer: Answer | None  # None when the prediction does not execute
    unexecutable: bool
    linked: list[dict]
    subgraph_snapshot: dict
    timings_ms: dict[str, float]

    def to_dict(self, labeler) -> dict:
        return {
            "utterance": self.utterance,
            "sparql": self.sparql,
            "answer": self.answer.to_dict(labeler) if self.answer is not None else None,
            "unexecutable": self.unexecutable,
            "linked_entities": self.linked,
            "subgraph": self.subgraph_snapshot,
            "timings_ms": self.timings_ms,
        }


@dataclass
class Session:
    session_id: str
    t_max: int
    context: TurnContext
    transcript: list[TurnRecord] = field(default_factory=list)
    last_active: float = field(default_factory=time.monotonic)


class RiggedParser:
    """Test double: returns scripted token sequences keyed by utterance."""

    def __init__(self, script: dict[str, list[str]]):
        # script maps normalized utterance -> serializer surface tokens
        self.script = {" ".join(tokenize(k)): v for k, v in script.items()}

    def predict(self, utterance_tokens: list[str], composed: list[str], subgraph: ContextSubgraph) -> list[OutputToken]:
        from .model import align_gold_query

        surface = self.script.get(" ".join(utterance_tokens))
        if surface is None:
            return []
        tokens, _ = align_gold_query(surface, subgraph)
        return tokens[:-1]  # drop end-of-query


class ModelParser:
    """Production parser over a trained checkpoint."""

    def __init__(self, params: ModelParams, vocab: Vocab):
        self.fast = FastInference(params)
        self.vocab = vocab
        self.max_input_len = params.cfg.max_input_len

    def predict(self, utterance_tokens: list[str], composed: list[str], subgraph: ContextSubgraph) -> list[OutputToken]:
        inp = composed_features(truncate_input(composed, self.max_input_len), self.vocab)
        z = self.fast.encode_utterance(inp)
        h = self.fast.encode_graph(batch_graphs([subgraph], self.vocab))
        return self.fast.greedy(z, h)


class Engine:
    """Shared read-only state plus the per-turn pipeline."""

    def __init__(
        self,
        kg: KnowledgeGraph,
        linker: Linker,
        parser,
        t_max: int = 5,
        use_type_link: bool = True,
        checkpoint_id: str = "unset",
    ):
        self.kg = kg
        self.linker = linker
        self.parser = parser
        self.t_max = t_max
        self.use_type_link = use_type_link
        self.checkpoint_id = checkpoint_id
        self.builder = SubgraphBuilder(kg)

    def new_session(self) -> Session:
        return Session(session_id=uuid.uuid4().hex, t_max=self.t_max, context=TurnContext(t_max=self.t_max))

    def step(self, session: Session, utterance: str) -> TurnRecord:
        if not utterance or not utterance.strip():
            raise EmptyUtterance("utterance must be non-empty")
        timings: dict[str, float] = {}

        def clock(name, t0):
            timings[name] = round(1000 * (time.perf_counter() - t0), 3)

        t0 = time.perf_counter()
        tokens = tokenize(utterance)
        spans, entities = self.linker.link(tokens)
        clock("link", t0)

        t0 = time.perf_counter()
        ctx = session.context
        g_t, merged = build_turn_graph(self.builder, ctx, tokens, entities, use_type_link=self.use_type_link)
        if ctx.t_max == 0:
            composed = compose_input([], None, tokens, self.kg.label)
        else:
            composed = compose_input(ctx.prev_utterance, ctx.prev_answer, tokens, self.kg.label)
        clock("build", t0)

        t0 = time.perf_counter()
        out_tokens = self.parser.predict(tokens, composed, merged)
        sparql_text = realize_tokens(out_tokens, merged)
        clock("decode", t0)

        t0 = time.perf_counter()
        answer: Answer | None
        try:
            answer = execute(self.kg, parse_sparql(sparql_text))
            unexecutable = False
        except (SparqlSyntaxError, UnsupportedConstruct, ValueError):
            answer = None
            unexecutable = True
        clock("execute", t0)

        record = TurnRecord(
            utterance=utterance,
            sparql=canonicalize(sparql_text)[0] if sparql_text else "",
            answer=answer,
            unexecutable=unexecutable,
            linked=[
                {"surface": s.surface, "id": s.candidates[0], "label": self.kg.label(s.candidates[0])}
                for s in spans
            ],
            subgraph_snapshot=merged.to_dict(),
            timings_ms=timings,
        )
        session.transcript.append(record)
        fallback = Answer(kind="entity_set", entities=frozenset())
        session.context.advance(g_t, tokens, answer if answer is not None else fallback)
        session.last_active = time.monotonic()
        return record


class SessionStore:
    """The only synchronized mutable structure in the service."""

    def __init__(self, engine: Engine, idle_timeout_s: float = 1800.0):
        self.engine = engine
        self.idle_timeout_s = idle_timeout_s
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def create(self) -> Session:
        session = self.engine.new_session()
        with self._lock:
            self._expire_locked()
            self._sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Session | None:
        with self._lock:
            self._expire_locked()
            return self._sessions.get(session_id)

    def _expire_locked(self) -> None:
        now = time.monotonic()
        dead = [k for k, s in self._sessions.items() if now - s.last_active > self.idle_timeout_s]
        for k in dead:
            del self._sessions[k]

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)
