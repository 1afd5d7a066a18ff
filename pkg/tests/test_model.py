import numpy as np
import pytest

from convparse import autodiff as ad
from convparse.autodiff import Tensor
from convparse.model import (
    GraphBatch,
    ModelConfig,
    ModelParams,
    align_gold_query,
    batch_graphs,
    compose_input,
    decode_step,
    encode_graph,
    encode_utterance,
    example_loss,
    greedy_decode,
    init_nodes,
    output_logits,
    realize_tokens,
    sequence_log_probs,
    split_node_states,
    truncate_input,
)
from convparse.sparql import Answer
from convparse.subgraph import ContextSubgraph
from convparse.text import CLS, SEP
from convparse.vocab import BOS, EOQ, SYNTAX_TOKENS, OutputToken, Vocab, node_token, syntax_token

TINY = ModelConfig(d_model=8, n_heads=2, gat_heads=2, ffn_mult=2, seed=3)


def tiny_vocab() -> Vocab:
    words = [f"w{i}" for i in range(20)] + ["who", "is", "?", ",", "yes", "no", CLS, SEP]
    return Vocab.build([words])


def make_subgraph(n_nodes, edges, labels=None) -> ContextSubgraph:
    g = ContextSubgraph()
    for i in range(n_nodes):
        toks = labels[i] if labels else (f"w{i}",)
        g.add_node(f"Q{i}", "entity" if i % 3 else "relation", toks, "ent_hop")
    for s, d in edges:
        g.add_edge(s, d)
    return g


# ---------------------------------------------------------------------------
# input composition
# ---------------------------------------------------------------------------


def test_compose_input_turn1_has_empty_slots():
    toks = compose_input([], None, ["who", "is", "?"], labeler=str)
    assert toks == [CLS, SEP, SEP, "who", "is", "?"]


def test_compose_input_renders_entity_answers():
    labels = {"Q1": "rainer werner fassbinder", "Q2": "volker schlöndorff"}
    ans = Answer(kind="entity_set", entities=frozenset(labels))
    toks = compose_input(["who", "starred"], ans, ["and", "next"], labeler=labels.get)
    i1, i2 = toks.index(SEP), len(toks) - 1 - toks[::-1].index(SEP)
    assert toks[:i1] == [CLS, "who", "starred"]
    assert toks[i1 + 1 : i2] == ["rainer", "werner", "fassbinder", ",", "volker", "schlöndorff"]
    assert toks[i2 + 1 :] == ["and", "next"]


def test_compose_input_boolean_and_count():
    toks = compose_input(["a"], Answer(kind="boolean", truth=False), ["b"], labeler=str)
    assert toks == [CLS, "a", SEP, "no", SEP, "b"]
    toks = compose_input(["a"], Answer(kind="count", value=12), ["b"], labeler=str)
    assert toks == [CLS, "a", SEP, "12", SEP, "b"]


def test_truncate_drops_oldest_history_first():
    toks = [CLS] + [f"h{i}" for i in range(10)] + [SEP, "cur"]
    out = truncate_input(toks, 6)
    assert out[0] == CLS
    assert out[-2:] == [SEP, "cur"]
    assert len(out) == 6


# ---------------------------------------------------------------------------
# utterance encoder
# ---------------------------------------------------------------------------


def test_encoder_shape_and_determinism():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    ids = vocab.ids([CLS, "who", "is", "w3", "?"])
    z1 = encode_utterance(params, ids)
    z2 = encode_utterance(params, ids)
    assert z1.shape == (5, TINY.d_model)
    assert np.array_equal(z1.data, z2.data)


def test_encoder_truncates_to_max_len():
    vocab = tiny_vocab()
    cfg = ModelConfig(d_model=8, max_input_len=6, seed=1)
    params = ModelParams(cfg, len(vocab))
    ids = vocab.ids([CLS] + [f"w{i % 9}" for i in range(30)])
    assert encode_utterance(params, ids).shape == (6, 8)


def test_encoder_gradient_probe():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    ids = vocab.ids([CLS, "who", "w1", "w2"])
    probe = [params["tok_emb"], params["enc0.self.wq"], params["enc1.ffn.w1"], params["enc.lnf.g"]]

    def f():
        z = encode_utterance(params, ids)
        return ad.mean_(ad.mul(z, z))

    err = ad.grad_check(f, probe, max_coords=12, rng=np.random.default_rng(0))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# node initialization
# ---------------------------------------------------------------------------


def test_init_nodes_single_token_label():
    # one-token label: h0 equals the contextualizer's state for that token
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    g = make_subgraph(1, [], labels={0: ("w5",)})
    batch = batch_graphs([g], vocab)
    h0 = init_nodes(params, batch)
    expected = encode_utterance(params, [vocab.id("w5")]).data[0]
    assert np.allclose(h0.data[0], expected, atol=1e-12)


def test_init_nodes_is_mean_of_contextual_token_states():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    g = make_subgraph(1, [], labels={0: ("w1", "w2", "w3")})
    h0 = init_nodes(params, batch_graphs([g], vocab))
    rows = encode_utterance(params, vocab.ids(["w1", "w2", "w3"])).data
    assert np.allclose(h0.data[0], rows.mean(axis=0), atol=1e-12)


def test_init_nodes_deduplicates_shared_labels():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    g = ContextSubgraph()
    g.add_node("Q1", "entity", ("w1", "w2"), "ent_hop")
    g.add_node("Q2", "entity", ("w1", "w2"), "ent_hop")
    batch = batch_graphs([g], vocab)
    assert len(batch.label_sizes) == 1
    h0 = init_nodes(params, batch)
    assert np.allclose(h0.data[0], h0.data[1], atol=1e-15)


# ---------------------------------------------------------------------------
# graph attention
# ---------------------------------------------------------------------------


def leaky(x):
    return np.where(x > 0, x, 0.2 * x)


def elu(x):
    return np.where(x > 0, x, np.exp(np.minimum(x, 0)) - 1)


def gat_oracle(params: ModelParams, h0: np.ndarray, edges, n):
    """Per-node dense recomputation, in-neighbors plus self."""
    cfg = params.cfg
    h = h0.copy()
    for layer in range(cfg.gat_layers):
        head_outs = []
        for k in range(cfg.gat_heads):
            wd = params[f"gat{layer}.h{k}.w_dst"].data
            ws = params[f"gat{layer}.h{k}.w_src"].data
            a = params[f"gat{layer}.h{k}.att"].data[:, 0]
            pd, ps = h @ wd, h @ ws
            out = np.zeros_like(pd)
            for i in range(n):
                nbrs = sorted({s for s, d in edges if d == i} | {i})
                scores = np.array([a @ leaky(pd[i] + ps[j]) for j in nbrs])
                alph = np.exp(scores - scores.max())
                alph = alph / alph.sum()
                out[i] = elu(sum(al * ps[j] for al, j in zip(alph, nbrs)))
            head_outs.append(out)
        h = np.concatenate(head_outs, axis=1)
    return h


def test_gat_matches_hand_computed_path_graph():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    edges = [(0, 1), (1, 2)]
    g = make_subgraph(3, edges)
    batch = batch_graphs([g], vocab)
    h0 = init_nodes(params, batch)
    h = encode_graph(params, batch)
    expected = gat_oracle(params, h0.data, edges, 3)
    assert np.allclose(h.data, expected, atol=1e-9)


def test_attention_rows_sum_to_one():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    rng = np.random.default_rng(5)
    for _ in range(10):
        n = int(rng.integers(1, 9))
        edges = {(int(rng.integers(n)), int(rng.integers(n))) for _ in range(rng.integers(0, 15))}
        g = make_subgraph(n, sorted(edges), labels={i: (f"w{i % 18}",) for i in range(n)})
        batch = batch_graphs([g], vocab)
        collected: list = []
        encode_graph(params, batch, collect_attention=collected)
        assert len(collected) == TINY.gat_layers * TINY.gat_heads
        for _, _, dst, alpha in collected:
            sums = np.zeros(n)
            np.add.at(sums, dst, alpha)
            assert np.allclose(sums, 1.0, atol=1e-9)


def test_isolated_node_attends_to_itself_only():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    g = make_subgraph(2, [(0, 1)])
    batch = batch_graphs([g], vocab)
    collected: list = []
    h = encode_graph(params, batch, collect_attention=collected)
    # node 0 has no in-edges: its only attention weight is the self edge
    _, _, dst, alpha = collected[0]
    self_weights = alpha[(batch.edge_src == batch.edge_dst) & (dst == 0)]
    assert np.allclose(self_weights, 1.0, atol=1e-12)
    # edgeless graph: every state is elu(W_src h0_i)
    g2 = make_subgraph(3, [])
    b2 = batch_graphs([g2], vocab)
    h0 = init_nodes(params, b2)
    h2 = encode_graph(params, b2)
    cur = h0.data
    for layer in range(TINY.gat_layers):
        cur = np.concatenate(
            [elu(cur @ params[f"gat{layer}.h{k}.w_src"].data) for k in range(TINY.gat_heads)], axis=1
        )
    assert np.allclose(h2.data, cur, atol=1e-12)


def test_gat_gradient_check():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    g = make_subgraph(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)])
    batch = batch_graphs([g], vocab)
    probe = [params["gat0.h0.w_dst"], params["gat0.h1.att"], params["gat1.h0.w_src"], params["tok_emb"]]

    def f():
        h = encode_graph(params, batch)
        return ad.mean_(ad.mul(h, h))

    err = ad.grad_check(f, probe, max_coords=10, rng=np.random.default_rng(1))
    assert err < 1e-4


def test_permutation_equivariance():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    labels = {0: ("w1",), 1: ("w2", "w3"), 2: ("w4",), 3: ("w5",)}
    edges = [(0, 1), (1, 2), (3, 1)]
    g = make_subgraph(4, edges, labels)
    perm = [2, 0, 3, 1]  # new position of old node i is perm.index(i)
    inv = {old: new for new, old in enumerate(perm)}
    g2 = ContextSubgraph()
    for new, old in enumerate(perm):
        n = g.nodes[old]
        g2.add_node(n.element, n.node_class, n.label_tokens, n.origin)
    for s, d in edges:
        g2.add_edge(inv[s], inv[d])
    h1 = encode_graph(params, batch_graphs([g], vocab))
    h2 = encode_graph(params, batch_graphs([g2], vocab))
    assert np.allclose(h2.data, h1.data[perm], atol=1e-9)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def test_batch_of_one_is_identity():
    vocab = tiny_vocab()
    g = make_subgraph(3, [(0, 1)])
    batch = batch_graphs([g], vocab)
    assert batch.n_nodes == 3
    assert batch.offsets == [0, 3]


def test_batch_has_no_cross_edges():
    vocab = tiny_vocab()
    a = make_subgraph(3, [(0, 1), (1, 2)])
    b = make_subgraph(4, [(0, 3)])
    batch = batch_graphs([a, b], vocab)
    assert batch.n_nodes == 7
    for s, d in zip(batch.edge_src, batch.edge_dst):
        assert (s < 3) == (d < 3)


def test_batched_forward_equals_per_graph():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    rng = np.random.default_rng(11)
    graphs = []
    for _ in range(3):
        n = int(rng.integers(2, 7))
        edges = sorted({(int(rng.integers(n)), int(rng.integers(n))) for _ in range(rng.integers(1, 10))})
        graphs.append(make_subgraph(n, edges, labels={i: (f"w{int(rng.integers(18))}",) for i in range(n)}))
    stacked = encode_graph(params, batch_graphs(graphs, vocab))
    parts = split_node_states(stacked, batch_graphs(graphs, vocab))
    for g, part in zip(graphs, parts):
        solo = encode_graph(params, batch_graphs([g], vocab))
        assert np.allclose(part.data, solo.data, atol=1e-9)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def build_tiny_model():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    g = make_subgraph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    batch = batch_graphs([g], vocab)
    z = encode_utterance(params, vocab.ids([CLS, SEP, SEP, "who", "is", "w3"]))
    h = encode_graph(params, batch)
    return vocab, params, g, z, h


def test_decode_step_distribution_contract():
    _, params, g, z, h = build_tiny_model()
    dist = decode_step(params, [syntax_token("SELECT")], z, h)
    assert dist.shape == (len(SYNTAX_TOKENS) + len(g),)
    assert abs(dist.sum() - 1.0) < 1e-9
    assert (dist >= 0).all()


def test_greedy_decode_deterministic_and_bounded():
    _, params, g, z, h = build_tiny_model()
    out1 = greedy_decode(params, z, h)
    out2 = greedy_decode(params, z, h)
    assert out1 == out2
    assert len(out1) <= params.cfg.max_decode_len
    single = greedy_decode(params, z, h, max_len=1)
    assert len(single) <= 1


def test_empty_graph_decodes_over_syntax_only():
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    z = encode_utterance(params, vocab.ids([CLS, SEP, SEP, "who"]))
    h = encode_graph(params, batch_graphs([ContextSubgraph()], vocab))
    dist = decode_step(params, [], z, h)
    assert dist.shape == (len(SYNTAX_TOKENS),)
    greedy_decode(params, z, h, max_len=4)  # must not crash


def test_realize_fig1_ask():
    g = ContextSubgraph()
    g.add_node("Q76025", "entity", ("reinhard", "hauff"), "ent_hop")
    g.add_node("P161", "relation", ("cast", "member"), "ent_hop")
    g.add_node("Q24807818", "entity", ("dubashi",), "carryover")
    toks = [
        syntax_token("ASK"),
        syntax_token("{"),
        node_token(0),
        node_token(1),
        node_token(2),
        syntax_token("."),
        syntax_token("}"),
    ]
    assert realize_tokens(toks, g) == "ASK { wd:Q76025 wdt:P161 wd:Q24807818 . }"


def test_align_gold_maps_shared_entity_to_single_node():
    g = ContextSubgraph()
    g.add_node("Q3298576", "entity", ("mathias", "kneissl"), "ent_hop")
    g.add_node("P57", "relation", ("director",), "ent_hop")
    g.add_node("Q502895", "type", ("common", "name"), "ent_hop")
    surface = ["SELECT", "?x", "WHERE", "{", "wd:Q3298576", "wdt:P57", "?x", ".", "?x", "wdt:P31", "wd:Q502895", ".", "}"]
    tokens, missing = align_gold_query(surface, g)
    assert missing == ["P31"]
    node_refs = [t.node_id for t in tokens if t.tag == "node"]
    assert node_refs == [0, 1, 2]
    assert tokens[-1] == syntax_token(EOQ)


def test_sequence_log_probs_and_loss_gradient():
    vocab, params, g, z, h = build_tiny_model()
    gold = [
        syntax_token("ASK"),
        syntax_token("{"),
        node_token(0),
        node_token(1),
        node_token(2),
        syntax_token("."),
        syntax_token("}"),
        syntax_token(EOQ),
    ]
    lp = sequence_log_probs(params, gold, z, h)
    assert lp.shape == (len(gold),)
    assert (lp.data <= 0).all()

    probe = [params["w1"], params["dec0.cross.wq"], params["syn_emb"], params["gat1.h1.w_src"]]

    def f():
        return example_loss(params, gold, encode_utterance(params, vocab.ids([CLS, SEP, SEP, "who", "is", "w3"])), encode_graph(params, batch_graphs([g], vocab)))

    err = ad.grad_check(f, probe, max_coords=8, rng=np.random.default_rng(2))
    assert err < 1e-3


def test_end_to_end_gradient_all_param_groups():
    # d_model=8, 5 nodes, 6-token utterance: sampled coordinates from every tensor
    vocab, params, g, z, h = build_tiny_model()
    gold = [syntax_token("SELECT"), syntax_token("?x"), node_token(3), syntax_token(EOQ)]
    ids = vocab.ids([CLS, SEP, SEP, "who", "is", "w3"])

    def f():
        zz = encode_utterance(params, ids)
        hh = encode_graph(params, batch_graphs([g], vocab))
        return example_loss(params, gold, zz, hh)

    tensors = [t for _, t in params.items()]
    err = ad.grad_check(f, tensors, max_coords=2, rng=np.random.default_rng(4))
    assert err < 1e-3


def test_checkpoint_round_trip(tmp_path):
    vocab = tiny_vocab()
    params = ModelParams(TINY, len(vocab))
    path = tmp_path / "model.ckpt"
    params.save(path)
    loaded = ModelParams.load(path)
    assert loaded.cfg == params.cfg
    for name, t in params.items():
        assert np.array_equal(loaded[name].data, t.data)
