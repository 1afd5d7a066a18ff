"""End-to-end training: decoupled-weight-decay Adam, teacher forcing,
dev-EM model selection, and the preprocessing that turns raw interactions
into aligned training examples."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .inference import FastInference
from .kg import KnowledgeGraph
from .linking import Linker
from .model import (
    ModelParams,
    align_gold_query,
    batch_graphs,
    batched_losses,
    compose_input,
    composed_features,
    encode_graph,
    realize_tokens,
    split_node_states,
    truncate_input,
)
from .sparql import Answer, UnsupportedConstruct, parse_sparql, query_tokens, serialize
from .subgraph import ContextSubgraph, SubgraphBuilder, TurnContext, build_turn_graph
from .text import tokenize
from .vocab import OutputToken, Vocab

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    max_epochs: int = 60
    patience: int = 5
    clip_norm: float = 1.0
    t_max: int = 5
    use_type_link: bool = True
    dev_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.beta1, self.beta2, self.eps, self.batch_size, self.max_epochs) <= 0:
            raise ValueError("optimizer settings must be positive")
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay applied directly to the weights."""

    def __init__(self, tensors: dict[str, Tensor], cfg: TrainConfig):
        self.tensors = tensors
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}

    def step(self) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for k, t in self.tensors.items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            t.data -= c.learning_rate * (m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * t.data)


def clip_global_norm(tensors: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for t in tensors.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for t in tensors.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


@dataclass
class TrainExample:
    interaction_id: str
    turn_index: int  # 1-based position within the interaction
    question_type: str
    phenomena: tuple[str, ...]
    has_type_constraint: bool
    utterance: str
    composed: list[str]
    subgraph: ContextSubgraph
    gold_sparql: str
    gold_answer: Answer
    gold_tokens: list[OutputToken] | None
    reachable: bool
    gold_unparseable: bool = False
    missing_elements: tuple[str, ...] = ()


def split_interactions(interactions: list[dict], dev_fraction: float = 0.1) -> tuple[list[dict], list[dict]]:
    """Stable split by interaction id hash; interactions never straddle."""
    if dev_fraction <= 0:
        return list(interactions), []
    buckets = max(2, round(1.0 / dev_fraction))
    train, dev = [], []
    for inter in interactions:
        digest = hashlib.md5(str(inter["id"]).encode("utf-8")).hexdigest()
        (dev if int(digest, 16) % buckets == 0 else train).append(inter)
    return train, dev


def _canonical_gold(sparql_text: str):
    try:
        ast = parse_sparql(sparql_text)
        return ast, serialize(ast)
    except (UnsupportedConstruct, ValueError):
        return None, " ".join(sparql_text.split())


def preprocess(
    interactions: list[dict],
    kg: KnowledgeGraph,
    linker: Linker,
    cfg: TrainConfig,
    max_input_len: int = 96,
) -> list[TrainExample]:
    """Replay interactions with gold answers as history and align gold
    parses to subgraph nodes. Alignment failures are tagged unreachable,
    never dropped."""
    builder = SubgraphBuilder(kg)
    out: list[TrainExample] = []
    for inter in interactions:
        ctx = TurnContext(t_max=cfg.t_max)
        for idx, turn in enumerate(inter["turns"], start=1):
            tokens = tokenize(turn["utterance"])
            _, entities = linker.link(tokens)
            g_t, merged = build_turn_graph(builder, ctx, tokens, entities, use_type_link=cfg.use_type_link)
            if cfg.t_max == 0:
                composed = compose_input([], None, tokens, kg.label)
            else:
                composed = compose_input(ctx.prev_utterance, ctx.prev_answer, tokens, kg.label)
            composed = truncate_input(composed, max_input_len)

            ast, canonical = _canonical_gold(turn["sparql"])
            gold_answer = Answer.from_dict(turn["answer"])
            if ast is None:
                gold_tokens, missing = None, ()
                reachable = False
            else:
                gold_tokens, missing_list = align_gold_query(query_tokens(ast), merged)
                missing = tuple(missing_list)
                reachable = not missing
                if not reachable:
                    gold_tokens = None
            out.append(
                TrainExample(
                    interaction_id=str(inter["id"]),
                    turn_index=idx,
                    question_type=turn.get("question_type", "unknown"),
                    phenomena=tuple(turn.get("phenomena", ())),
                    has_type_constraint=bool(turn.get("has_type_constraint", False)),
                    utterance=turn["utterance"],
                    composed=composed,
                    subgraph=merged,
                    gold_sparql=canonical,
                    gold_answer=gold_answer,
                    gold_tokens=gold_tokens,
                    reachable=reachable,
                    gold_unparseable=ast is None,
                    missing_elements=missing,
                )
            )
            ctx.advance(g_t, tokens, gold_answer)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_dev_em: float = 0.0
    best_epoch: int = -1


def example_features(ex: TrainExample, vocab: Vocab) -> tuple[tuple, "object"]:
    """Cached (composed input triple, single-graph batch) for one example."""
    cached = getattr(ex, "_features", None)
    if cached is None:
        cached = (composed_features(ex.composed, vocab), batch_graphs([ex.subgraph], vocab))
        ex._features = cached
    return cached


def predict_example(params: ModelParams, vocab: Vocab, ex: TrainExample, fast: FastInference | None = None) -> str:
    fast = fast or FastInference(params)
    inp, gb = example_features(ex, vocab)
    z = fast.encode_utterance(inp)
    h = fast.encode_graph(gb)
    tokens = fast.greedy(z, h)
    return realize_tokens(tokens, ex.subgraph)


def exact_match_rate(params: ModelParams, vocab: Vocab, examples: list[TrainExample]) -> float:
    """Greedy-decode EM; unreachable turns count as wrong."""
    if not examples:
        return 0.0
    fast = FastInference(params)
    hits = 0
    for ex in examples:
        pred = predict_example(params, vocab, ex, fast)
        _, canon_pred = _canonical_gold(pred)
        hits += int(canon_pred == ex.gold_sparql)
    return hits / len(examples)


def batch_loss(params: ModelParams, vocab: Vocab, batch: list[TrainExample]) -> Tensor:
    """Mean of per-example losses; graphs and sequences are encoded
    block-diagonally."""
    gb = batch_graphs([ex.subgraph for ex in batch], vocab)
    h_all = encode_graph(params, gb)
    parts = split_node_states(h_all, gb)
    items = [(example_features(ex, vocab)[0], ex.gold_tokens, h) for ex, h in zip(batch, parts)]
    losses = batched_losses(params, items)
    total = losses[0]
    for loss in losses[1:]:
        total = ad.add(total, loss)
    return ad.smul(total, 1.0 / len(batch))


def train(
    params: ModelParams,
    vocab: Vocab,
    train_examples: list[TrainExample],
    dev_examples: list[TrainExample],
    cfg: TrainConfig,
) -> TrainResult:
    trainable = [ex for ex in train_examples if ex.reachable]
    skipped = len(train_examples) - len(trainable)
    if skipped:
        logger.info("excluding %d unreachable examples from the loss", skipped)
    if not trainable:
        raise ValueError("no reachable training examples")

    opt = AdamW(params.tensors, cfg)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    best_snapshot = params.copy_data()
    epochs_since_best = 0

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(trainable))
        losses = []
        for start in range(0, len(trainable), cfg.batch_size):
            batch = [trainable[i] for i in order[start : start + cfg.batch_size]]
            with ad.tape() as t:
                loss = batch_loss(params, vocab, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {len(losses)}; "
                    f"examples {[ex.interaction_id + ':' + str(ex.turn_index) for ex in batch]}"
                )
            t.backward(loss)
            clip_global_norm(params.tensors, cfg.clip_norm)
            opt.step()
            params.zero_grads()
            losses.append(value)

        dev_pool = dev_examples if dev_examples else train_examples
        dev_em = exact_match_rate(params, vocab, dev_pool)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "dev_em": dev_em,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        result.history.append(record)
        logger.info("epoch %d loss %.4f dev_em %.3f", epoch, record["loss"], dev_em)

        if dev_em > result.best_dev_em or result.best_epoch < 0:
            result.best_dev_em = dev_em
            result.best_epoch = epoch
            best_snapshot = params.copy_data()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best > cfg.patience:
                logger.info("early stop at epoch %d", epoch)
                break

    params.load_data(best_snapshot)
    return result
