"""The neural semantic parser.

Three parts share one token embedding table:
  * a small trainable transformer encoder standing in for a pretrained
    contextualizer over ``[CLS] prev-utterance [SEP] prev-answer [SEP]
    utterance``;
  * a two-layer, two-head GATv2 graph encoder over the merged context
    subgraph, with node states initialized to the mean of their label-token
    embeddings;
  * a two-layer transformer decoder whose output alphabet is the syntax
    vocabulary plus the subgraph nodes: syntax logits come from a learned
    output matrix, node logits from dot products with the node states, and
    the two are normalized jointly.

Attention neighborhoods are the in-neighbors of each node plus the node
itself; the self-edge keeps every node's own label signal in its state so
that sibling nodes with identical in-neighborhoods stay distinguishable to
the copy head.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sparql import Answer
from .subgraph import ContextSubgraph
from .text import CLS, SEP
from .vocab import BOS, EOQ, SYNTAX_TOKENS, OutputToken, Vocab, node_token, syntax_token


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    gat_layers: int = 2
    gat_heads: int = 2
    ffn_mult: int = 2
    max_input_len: int = 96
    max_decode_len: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads or self.d_model % self.gat_heads:
            raise ValueError("d_model must be divisible by the head counts")


_POSITION_CACHE: dict[int, np.ndarray] = {}


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    cached = _POSITION_CACHE.get(d)
    if cached is None or cached.shape[0] < n:
        size = max(256, 2 * n)
        pos = np.arange(size)[:, None]
        i = np.arange(d)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
        cached = np.zeros((size, d))
        cached[:, 0::2] = np.sin(angle[:, 0::2])
        cached[:, 1::2] = np.cos(angle[:, 1::2])
        _POSITION_CACHE[d] = cached
    return cached[:n]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class ModelParams:
    """Named trainable tensors plus the model configuration."""

    def __init__(self, cfg: ModelConfig, n_tokens: int, n_syntax: int = len(SYNTAX_TOKENS)):
        self.cfg = cfg
        self.n_tokens = n_tokens
        self.n_syntax = n_syntax
        self.tensors: dict[str, Tensor] = {}
        self._init(np.random.default_rng(cfg.seed))

    def _add(self, name: str, data: np.ndarray) -> None:
        self.tensors[name] = Tensor(data, requires_grad=True)

    def _init_block(self, rng, prefix: str, cross_attention: bool) -> None:
        d, f = self.cfg.d_model, self.cfg.ffn_mult * self.cfg.d_model
        attns = ["self"] + (["cross"] if cross_attention else [])
        for a in attns:
            for w in ("wq", "wk", "wv", "wo"):
                self._add(f"{prefix}.{a}.{w}", _xavier(rng, d, d))
            self._add(f"{prefix}.{a}.ln.g", np.ones(d))
            self._add(f"{prefix}.{a}.ln.b", np.zeros(d))
        self._add(f"{prefix}.ffn.w1", _xavier(rng, d, f))
        self._add(f"{prefix}.ffn.b1", np.zeros(f))
        self._add(f"{prefix}.ffn.w2", _xavier(rng, f, d))
        self._add(f"{prefix}.ffn.b2", np.zeros(d))
        self._add(f"{prefix}.ffn.ln.g", np.ones(d))
        self._add(f"{prefix}.ffn.ln.b", np.zeros(d))

    def _init(self, rng) -> None:
        cfg = self.cfg
        d = cfg.d_model
        # unit-scale embeddings keep graph-node states (means of label token
        # embeddings, no layer norm on the GAT path) commensurate with the
        # layer-normed utterance states, so copy logits H·s start healthy
        self._add("tok_emb", rng.normal(0.0, 1.0, size=(self.n_tokens, d)))
        self._add("syn_emb", rng.normal(0.0, 1.0, size=(self.n_syntax, d)))
        self._add("seg_emb", rng.normal(0.0, 1.0, size=(3, d)))
        for l in range(cfg.enc_layers):
            self._init_block(rng, f"enc{l}", cross_attention=False)
        self._add("enc.lnf.g", np.ones(d))
        self._add("enc.lnf.b", np.zeros(d))
        dh = d // cfg.gat_heads
        for l in range(cfg.gat_layers):
            for k in range(cfg.gat_heads):
                # identity-like value/query maps and zero attention vectors:
                # aggregation starts as a plain neighborhood mean in the
                # shared encoder coordinates, so label-matching copy logits
                # are informative from the first epoch
                eye = np.zeros((d, dh))
                eye[k * dh : (k + 1) * dh, :] = np.eye(dh)
                noise = 0.02
                self._add(f"gat{l}.h{k}.w_dst", eye + rng.normal(0.0, noise, size=(d, dh)))
                self._add(f"gat{l}.h{k}.w_src", eye + rng.normal(0.0, noise, size=(d, dh)))
                self._add(f"gat{l}.h{k}.att", np.zeros((dh, 1)))
        for l in range(cfg.dec_layers):
            self._init_block(rng, f"dec{l}", cross_attention=True)
        self._add("dec.lnf.g", np.ones(d))
        self._add("dec.lnf.b", np.zeros(d))
        self._add("w1", _xavier(rng, self.n_syntax, d))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy_data(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_data(self, snapshot: dict[str, np.ndarray]) -> None:
        for k, v in self.tensors.items():
            v.data[...] = snapshot[k]

    # -- checkpoint io ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Single file: JSON manifest line, then little-endian float64 blobs."""
        manifest = {
            "config": asdict(self.cfg),
            "n_tokens": self.n_tokens,
            "n_syntax": self.n_syntax,
            "tensors": [],
        }
        payload = bytearray()
        for name, t in self.tensors.items():
            raw = t.data.astype("<f8").tobytes()
            manifest["tensors"].append({"name": name, "shape": list(t.shape), "offset": len(payload)})
            payload.extend(raw)
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
            fh.write(bytes(payload))

    @staticmethod
    def load(path: str | Path) -> "ModelParams":
        with open(path, "rb") as fh:
            manifest = json.loads(fh.readline().decode("utf-8"))
            payload = fh.read()
        params = ModelParams(ModelConfig(**manifest["config"]), manifest["n_tokens"], manifest["n_syntax"])
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
            params.tensors[entry["name"]].data[...] = arr
        return params


# ---------------------------------------------------------------------------
# input composition
# ---------------------------------------------------------------------------


def render_answer_tokens(answer: Answer | None, labeler, cap: int = 10) -> list[str]:
    from .text import tokenize

    if answer is None:
        return []
    if answer.kind == "boolean":
        return ["yes" if answer.truth else "no"]
    if answer.kind == "count":
        return [str(answer.value)]
    toks: list[str] = []
    for i, e in enumerate(sorted(answer.entities)[:cap]):
        if i:
            toks.append(",")
        toks.extend(tokenize(labeler(e)))
    return toks


def compose_input(
    prev_utterance: list[str],
    prev_answer: Answer | None,
    current: list[str],
    labeler,
) -> list[str]:
    """[CLS] previous utterance [SEP] previous answer [SEP] current."""
    return [CLS] + list(prev_utterance) + [SEP] + render_answer_tokens(prev_answer, labeler) + [SEP] + list(current)


def truncate_input(tokens: list[str], max_len: int) -> list[str]:
    """Drop oldest history tokens first, always keeping [CLS]."""
    if len(tokens) <= max_len:
        return tokens
    return [tokens[0]] + tokens[-(max_len - 1) :]


# segments of the composed input; the current utterance always gets the
# same segment id and restarting positions regardless of history length
SEG_HISTORY, SEG_ANSWER, SEG_CURRENT = 0, 1, 2


def composed_features(tokens: list[str], vocab: Vocab) -> tuple[list[int], list[int], list[int]]:
    """(token ids, within-segment positions, segment ids) for a composed
    input. Segments are delimited by the last two [SEP] tokens."""
    sep_at = [i for i, t in enumerate(tokens) if t == SEP]
    first = sep_at[-2] if len(sep_at) >= 2 else -1
    second = sep_at[-1] if sep_at else -1
    segments = []
    for i in range(len(tokens)):
        if second >= 0 and i > second:
            segments.append(SEG_CURRENT)
        elif first >= 0 and i > first:
            segments.append(SEG_ANSWER)
        else:
            segments.append(SEG_HISTORY)
    positions = []
    counters = {SEG_HISTORY: 0, SEG_ANSWER: 0, SEG_CURRENT: 0}
    for seg in segments:
        positions.append(counters[seg])
        counters[seg] += 1
    return vocab.ids(tokens), positions, segments


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------


def _ln(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _mha(p: ModelParams, prefix: str, x_q: Tensor, x_kv: Tensor, mask: Tensor | None, n_heads: int) -> Tensor:
    d = x_q.shape[1]
    dh = d // n_heads
    q = ad.matmul(x_q, p[f"{prefix}.wq"])
    k = ad.matmul(x_kv, p[f"{prefix}.wk"])
    v = ad.matmul(x_kv, p[f"{prefix}.wv"])
    heads = []
    for h in range(n_heads):
        qs = ad.slice_cols(q, h * dh, (h + 1) * dh)
        ks = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vs = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.smul(ad.matmul(qs, ad.transpose(ks)), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.add(scores, mask)
        heads.append(ad.matmul(ad.softmax(scores), vs))
    return ad.matmul(ad.concat(heads, axis=1), p[f"{prefix}.wo"])


def _ffn(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = ad.leaky_relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _encoder_block(p: ModelParams, prefix: str, x: Tensor, n_heads: int, mask: Tensor | None = None) -> Tensor:
    normed = _ln(p, f"{prefix}.self.ln", x)
    x = ad.add(x, _mha(p, f"{prefix}.self", normed, normed, mask, n_heads))
    return ad.add(x, _ffn(p, f"{prefix}.ffn", _ln(p, f"{prefix}.ffn.ln", x)))


def _block_diag_mask(sizes_q: list[int], sizes_k: list[int], causal: bool = False) -> np.ndarray:
    """Additive mask that confines attention to same-index blocks."""
    mask = np.full((sum(sizes_q), sum(sizes_k)), -np.inf)
    qo = ko = 0
    for q, k in zip(sizes_q, sizes_k):
        block = np.triu(np.full((q, k), -np.inf), k=1) if causal else np.zeros((q, k))
        mask[qo : qo + q, ko : ko + k] = block
        qo += q
        ko += k
    return mask


def _normalize_input(cfg: ModelConfig, inp) -> tuple[list[int], list[int], list[int]]:
    """Accept bare id lists or (ids, positions, segments) triples; truncate
    oldest-first to the input budget."""
    if isinstance(inp, tuple):
        ids, positions, segments = inp
    else:
        ids = list(inp)
        positions = list(range(len(ids)))
        segments = [SEG_CURRENT] * len(ids)
    if len(ids) > cfg.max_input_len:
        keep = cfg.max_input_len - 1
        ids = [ids[0]] + ids[-keep:]
        positions = [positions[0]] + positions[-keep:]
        segments = [segments[0]] + segments[-keep:]
    return ids, positions, segments


def encode_utterances(p: ModelParams, inputs: list) -> list[Tensor]:
    """Encode several composed inputs in one block-diagonal forward pass.

    Each input is either a token-id list or an (ids, positions, segments)
    triple; positions index the sinusoidal table per segment and segments
    select the learned history/answer/current embeddings."""
    cfg = p.cfg
    triples = [_normalize_input(cfg, inp) for inp in inputs]
    sizes = [len(ids) for ids, _, _ in triples]
    flat_ids = [i for ids, _, _ in triples for i in ids]
    flat_pos = [i for _, pos, _ in triples for i in pos]
    flat_seg = [i for _, _, seg in triples for i in seg]
    table = sinusoidal_positions(max(flat_pos) + 1, cfg.d_model)
    x = ad.gather(p["tok_emb"], flat_ids)
    x = ad.add(x, Tensor(table[np.asarray(flat_pos, dtype=np.intp)]))
    x = ad.add(x, ad.gather(p["seg_emb"], flat_seg))
    mask = Tensor(_block_diag_mask(sizes, sizes)) if len(sizes) > 1 else None
    for l in range(cfg.enc_layers):
        x = _encoder_block(p, f"enc{l}", x, cfg.n_heads, mask)
    z = _ln(p, "enc.lnf", x)
    offsets = np.cumsum([0] + sizes)
    return [ad.slice_rows(z, lo, hi) for lo, hi in zip(offsets[:-1], offsets[1:])]


def encode_utterance(p: ModelParams, inp) -> Tensor:
    """Contextual states for one composed input, shape (len, d_model)."""
    cfg = p.cfg
    ids, positions, segments = _normalize_input(cfg, inp)
    x = ad.gather(p["tok_emb"], ids)
    table = sinusoidal_positions(max(positions) + 1, cfg.d_model)
    x = ad.add(x, Tensor(table[np.asarray(positions, dtype=np.intp)]))
    x = ad.add(x, ad.gather(p["seg_emb"], segments))
    for l in range(cfg.enc_layers):
        x = _encoder_block(p, f"enc{l}", x, cfg.n_heads)
    return _ln(p, "enc.lnf", x)


# ---------------------------------------------------------------------------
# graph encoder
# ---------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """Subgraphs stacked block-diagonally: one node matrix, offset edges.

    Node labels are deduplicated: label_token_ids holds the unique label
    token sequences flattened, label_pool mean-pools contextual token states
    per unique label, node_label maps each node to its unique label row.
    """

    graphs: list[ContextSubgraph]
    offsets: list[int]
    n_nodes: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    label_token_ids: list[int]
    label_sizes: list[int]
    node_label: np.ndarray
    label_pool: np.ndarray


def batch_graphs(graphs: list[ContextSubgraph], vocab: Vocab) -> GraphBatch:
    offsets = [0]
    for g in graphs:
        offsets.append(offsets[-1] + len(g))
    n = offsets[-1]
    src_list: list[int] = []
    dst_list: list[int] = []
    for g, off in zip(graphs, offsets):
        for s, d in g.edges:
            src_list.append(s + off)
            dst_list.append(d + off)
        for i in range(len(g)):  # self edge keeps own-label signal
            src_list.append(i + off)
            dst_list.append(i + off)
    unique: dict[tuple[int, ...], int] = {}
    node_label: list[int] = []
    for g in graphs:
        for node in g.nodes:
            key = tuple(vocab.ids(node.label_tokens))
            node_label.append(unique.setdefault(key, len(unique)))
    flat: list[int] = []
    sizes: list[int] = []
    for key in unique:
        flat.extend(key)
        sizes.append(len(key))
    pool = np.zeros((max(len(sizes), 1), max(len(flat), 1)))
    start = 0
    for row, width in enumerate(sizes):
        pool[row, start : start + width] = 1.0 / width
        start += width
    return GraphBatch(
        graphs=graphs,
        offsets=offsets,
        n_nodes=n,
        edge_src=np.asarray(src_list, dtype=np.intp),
        edge_dst=np.asarray(dst_list, dtype=np.intp),
        label_token_ids=flat or [0],
        label_sizes=sizes or [1],
        node_label=np.asarray(node_label, dtype=np.intp),
        label_pool=pool,
    )


def encode_labels(p: ModelParams, batch: GraphBatch) -> Tensor:
    """Contextual state matrix for the batch's unique label sequences,
    mean-pooled per label: one stacked pass through the shared encoder.
    Labels use the current-utterance segment so surface matching against
    the live question happens in one representation space."""
    x = ad.gather(p["tok_emb"], batch.label_token_ids)
    pos = np.concatenate([sinusoidal_positions(k, p.cfg.d_model) for k in batch.label_sizes], axis=0)
    x = ad.add(x, Tensor(pos))
    x = ad.add(x, ad.gather(p["seg_emb"], [SEG_CURRENT] * len(batch.label_token_ids)))
    mask = Tensor(_block_diag_mask(batch.label_sizes, batch.label_sizes)) if len(batch.label_sizes) > 1 else None
    for l in range(p.cfg.enc_layers):
        x = _encoder_block(p, f"enc{l}", x, p.cfg.n_heads, mask)
    z = _ln(p, "enc.lnf", x)
    return ad.matmul(Tensor(batch.label_pool), z)


def init_nodes(p: ModelParams, batch: GraphBatch) -> Tensor:
    """h0: each row is the mean of the node's contextual label-token states
    from the shared utterance encoder (the trainable stand-in for averaging
    pretrained token encodings)."""
    pooled = encode_labels(p, batch)
    return ad.gather(pooled, batch.node_label)


def _gat_layer(
    p: ModelParams,
    layer: int,
    h: Tensor,
    batch: GraphBatch,
    scatter: Tensor,
    alphas: list | None,
) -> Tensor:
    cfg = p.cfg
    dh = cfg.d_model // cfg.gat_heads
    ones_row = Tensor(np.ones((1, dh)))
    heads = []
    for k in range(cfg.gat_heads):
        p_dst = ad.matmul(h, p[f"gat{layer}.h{k}.w_dst"])
        p_src = ad.matmul(h, p[f"gat{layer}.h{k}.w_src"])
        e_dst = ad.gather(p_dst, batch.edge_dst)
        e_src = ad.gather(p_src, batch.edge_src)
        scores = ad.matmul(ad.leaky_relu(ad.add(e_dst, e_src)), p[f"gat{layer}.h{k}.att"])
        # per-destination max shift: constant offset, softmax is shift-invariant
        shift = np.full(batch.n_nodes, -np.inf)
        np.maximum.at(shift, batch.edge_dst, scores.data[:, 0])
        ex = ad.exp(ad.add(scores, Tensor(-shift[batch.edge_dst][:, None])))
        denom = ad.matmul(scatter, ex)
        alpha = ad.mul(ex, ad.gather(ad.reciprocal(denom), batch.edge_dst))
        if alphas is not None:
            alphas.append((layer, k, batch.edge_dst.copy(), alpha.data[:, 0].copy()))
        weighted = ad.mul(e_src, ad.matmul(alpha, ones_row))
        heads.append(ad.elu(ad.matmul(scatter, weighted)))
    return ad.concat(heads, axis=1)


def encode_graph(p: ModelParams, batch: GraphBatch, collect_attention: list | None = None) -> Tensor:
    """Stacked GATv2 layers over h0; returns final node states (n, d)."""
    if batch.n_nodes == 0:
        return Tensor(np.zeros((0, p.cfg.d_model)))
    scatter = np.zeros((batch.n_nodes, len(batch.edge_dst)))
    scatter[batch.edge_dst, np.arange(len(batch.edge_dst))] = 1.0
    scatter_t = Tensor(scatter)
    h = init_nodes(p, batch)
    for layer in range(p.cfg.gat_layers):
        h = _gat_layer(p, layer, h, batch, scatter_t, collect_attention)
    return h


def split_node_states(h: Tensor, batch: GraphBatch) -> list[Tensor]:
    return [ad.slice_rows(h, lo, hi) for lo, hi in zip(batch.offsets[:-1], batch.offsets[1:])]


# ---------------------------------------------------------------------------
# decoder with copy output
# ---------------------------------------------------------------------------


def _decoder_inputs(p: ModelParams, prefix_tokens: list[OutputToken], node_states: Tensor) -> Tensor:
    """Embed BOS + generated prefix; node tokens reuse their encoder state."""
    cfg = p.cfg
    length = len(prefix_tokens) + 1
    syn_ids = [SYNTAX_TOKENS.index(BOS)] + [
        t.syntax_id if t.tag == "syntax" else 0 for t in prefix_tokens
    ]
    node_ids = [0] + [t.node_id if t.tag == "node" else 0 for t in prefix_tokens]
    is_node = np.array([False] + [t.tag == "node" for t in prefix_tokens])
    syn = ad.gather(p["syn_emb"], syn_ids)
    if node_states.shape[0] and is_node.any():
        nod = ad.gather(node_states, node_ids)
        node_mask = np.repeat(is_node[:, None], cfg.d_model, axis=1).astype(float)
        x = ad.add(ad.mul(syn, Tensor(1.0 - node_mask)), ad.mul(nod, Tensor(node_mask)))
    else:
        x = syn
    return ad.add(x, Tensor(sinusoidal_positions(length, cfg.d_model)))


def _decoder_states(
    p: ModelParams,
    x: Tensor,
    memory: Tensor,
    self_mask: Tensor | None = None,
    cross_mask: Tensor | None = None,
) -> Tensor:
    cfg = p.cfg
    if self_mask is None:
        length = x.shape[0]
        self_mask = Tensor(np.triu(np.full((length, length), -np.inf), k=1))
    for l in range(cfg.dec_layers):
        normed = _ln(p, f"dec{l}.self.ln", x)
        x = ad.add(x, _mha(p, f"dec{l}.self", normed, normed, self_mask, cfg.n_heads))
        x = ad.add(x, _mha(p, f"dec{l}.cross", _ln(p, f"dec{l}.cross.ln", x), memory, cross_mask, cfg.n_heads))
        x = ad.add(x, _ffn(p, f"dec{l}.ffn", _ln(p, f"dec{l}.ffn.ln", x)))
    return _ln(p, "dec.lnf", x)


def output_logits(p: ModelParams, states: Tensor, node_states: Tensor) -> Tensor:
    """Joint logits over the syntax alphabet followed by the subgraph nodes."""
    syn_logits = ad.matmul(states, ad.transpose(p["w1"]))
    if node_states.shape[0] == 0:
        return syn_logits
    node_logits = ad.matmul(states, ad.transpose(node_states))
    return ad.concat([syn_logits, node_logits], axis=1)


def sequence_log_probs(
    p: ModelParams,
    gold: list[OutputToken],
    utterance_states: Tensor,
    node_states: Tensor,
) -> Tensor:
    """Teacher-forced log probabilities of the gold sequence, shape (len,)."""
    memory = ad.concat([utterance_states, node_states], axis=0) if node_states.shape[0] else utterance_states
    x = _decoder_inputs(p, gold[:-1], node_states)
    states = _decoder_states(p, x, memory)
    logits = output_logits(p, states, node_states)
    return ad.take_per_row(ad.log_softmax(logits), _gold_targets(p, gold))


def example_loss(p, gold, utterance_states, node_states) -> Tensor:
    """Mean token-level cross-entropy of one gold sequence."""
    return ad.smul(ad.mean_(sequence_log_probs(p, gold, utterance_states, node_states)), -1.0)


def _gold_targets(p: ModelParams, gold: list[OutputToken]) -> list[int]:
    return [t.syntax_id if t.tag == "syntax" else p.n_syntax + t.node_id for t in gold]


def batched_losses(
    p: ModelParams,
    items: list[tuple[list[int], list[OutputToken], Tensor]],
) -> list[Tensor]:
    """Per-example losses for (token ids, gold tokens, node states) triples.

    Sequences are stacked block-diagonally (one encoder/decoder pass for the
    whole batch); losses are identical to the per-example path.
    """
    zs = encode_utterances(p, [ids for ids, _, _ in items])
    mem_parts: list[Tensor] = []
    mem_sizes: list[int] = []
    for (_, _, h), z in zip(items, zs):
        if h.shape[0]:
            mem_parts.extend([z, h])
            mem_sizes.append(z.shape[0] + h.shape[0])
        else:
            mem_parts.append(z)
            mem_sizes.append(z.shape[0])
    memory = ad.concat(mem_parts, axis=0)
    xs = [_decoder_inputs(p, gold[:-1], h) for _, gold, h in items]
    dec_sizes = [x.shape[0] for x in xs]
    x = ad.concat(xs, axis=0)
    self_mask = Tensor(_block_diag_mask(dec_sizes, dec_sizes, causal=True))
    cross_mask = Tensor(_block_diag_mask(dec_sizes, mem_sizes))
    states = _decoder_states(p, x, memory, self_mask, cross_mask)
    losses: list[Tensor] = []
    offset = 0
    for (_, gold, h), length in zip(items, dec_sizes):
        s_i = ad.slice_rows(states, offset, offset + length)
        offset += length
        logp = ad.take_per_row(ad.log_softmax(output_logits(p, s_i, h)), _gold_targets(p, gold))
        losses.append(ad.smul(ad.mean_(logp), -1.0))
    return losses


def decode_step(
    p: ModelParams,
    prefix: list[OutputToken],
    utterance_states: Tensor,
    node_states: Tensor,
) -> np.ndarray:
    """Distribution over |V_s| + n for the next token given the prefix."""
    memory = ad.concat([utterance_states, node_states], axis=0) if node_states.shape[0] else utterance_states
    x = _decoder_inputs(p, prefix, node_states)
    states = _decoder_states(p, x, memory)
    logits = output_logits(p, states, node_states)
    return ad.softmax(ad.slice_rows(logits, logits.shape[0] - 1, logits.shape[0])).data[0]


def greedy_decode(
    p: ModelParams,
    utterance_states: Tensor,
    node_states: Tensor,
    max_len: int | None = None,
) -> list[OutputToken]:
    """Argmax decoding until the end-of-query symbol; EOQ is not returned."""
    max_len = max_len or p.cfg.max_decode_len
    eoq = SYNTAX_TOKENS.index(EOQ)
    out: list[OutputToken] = []
    for _ in range(max_len):
        dist = decode_step(p, out, utterance_states, node_states)
        idx = int(np.argmax(dist))
        if idx < p.n_syntax:
            if idx == eoq:
                break
            out.append(OutputToken(tag="syntax", syntax_id=idx))
        else:
            out.append(OutputToken(tag="node", node_id=idx - p.n_syntax))
    return out


# ---------------------------------------------------------------------------
# realization: output tokens <-> query text
# ---------------------------------------------------------------------------


def realize_tokens(tokens: list[OutputToken], subgraph: ContextSubgraph) -> str:
    """Render decoded tokens as query text; relation nodes take the wdt:
    prefix, entity and type nodes wd:."""
    parts = []
    for t in tokens:
        if t.tag == "syntax":
            sym = SYNTAX_TOKENS[t.syntax_id]
            if sym in (BOS, EOQ):
                continue
            parts.append(sym)
        else:
            node = subgraph.nodes[t.node_id]
            prefix = "wdt:" if node.node_class == "relation" else "wd:"
            parts.append(prefix + node.element)
    return " ".join(parts)


def align_gold_query(surface_tokens: list[str], subgraph: ContextSubgraph) -> tuple[list[OutputToken], list[str]]:
    """Map serializer surface tokens to output tokens against one subgraph.

    Returns (tokens ending in EOQ, missing element ids). A non-empty missing
    list marks the turn unreachable: some gold KG element has no node to
    copy.
    """
    out: list[OutputToken] = []
    missing: list[str] = []
    for tok in surface_tokens:
        if tok.startswith("wd:") or tok.startswith("wdt:"):
            element = tok.split(":", 1)[1]
            node_id = subgraph.node_of(element)
            if node_id is None:
                missing.append(element)
            else:
                out.append(node_token(node_id))
        else:
            out.append(syntax_token(tok))
    out.append(syntax_token(EOQ))
    return out, missing
