"""Forward-only numpy inference path.

Mirrors the autodiff model math exactly (same layer order, eps, and head
slicing) but skips tape construction and caches decoder keys/values across
greedy steps. Parity with the autodiff path is pinned by tests.
"""

from __future__ import annotations

import math

import numpy as np

from .model import (
    SEG_CURRENT,
    GraphBatch,
    ModelParams,
    _block_diag_mask,
    _normalize_input,
    sinusoidal_positions,
)
from .subgraph import ContextSubgraph
from .vocab import BOS, EOQ, SYNTAX_TOKENS, OutputToken


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.2 * x)


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.exp(np.minimum(x, 0.0)) - 1.0)


class FastInference:
    """Greedy decoding and encoding against a frozen parameter snapshot."""

    def __init__(self, params: ModelParams):
        self.w = {k: t.data for k, t in params.items()}
        self.cfg = params.cfg
        self.n_syntax = params.n_syntax
        self._bos = SYNTAX_TOKENS.index(BOS)
        self._eoq = SYNTAX_TOKENS.index(EOQ)

    # -- shared pieces --------------------------------------------------------

    def _mha(self, prefix: str, x_q: np.ndarray, x_kv: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        w = self.w
        nh = self.cfg.n_heads
        dh = self.cfg.d_model // nh
        q = x_q @ w[f"{prefix}.wq"]
        k = x_kv @ w[f"{prefix}.wk"]
        v = x_kv @ w[f"{prefix}.wv"]
        outs = []
        for h in range(nh):
            s = slice(h * dh, (h + 1) * dh)
            scores = q[:, s] @ k[:, s].T * (1.0 / math.sqrt(dh))
            if mask is not None:
                scores = scores + mask
            outs.append(_softmax(scores) @ v[:, s])
        return np.concatenate(outs, axis=1) @ w[f"{prefix}.wo"]

    def _ffn(self, prefix: str, x: np.ndarray) -> np.ndarray:
        w = self.w
        h = _leaky(x @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"])
        return h @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]

    def _norm(self, prefix: str, x: np.ndarray) -> np.ndarray:
        return _ln(x, self.w[f"{prefix}.g"], self.w[f"{prefix}.b"])

    # -- encoders ---------------------------------------------------------------

    def encode_utterance(self, inp) -> np.ndarray:
        cfg = self.cfg
        ids, positions, segments = _normalize_input(cfg, inp)
        table = sinusoidal_positions(max(positions) + 1, cfg.d_model)
        x = (
            self.w["tok_emb"][np.asarray(ids, dtype=np.intp)]
            + table[np.asarray(positions, dtype=np.intp)]
            + self.w["seg_emb"][np.asarray(segments, dtype=np.intp)]
        )
        for l in range(cfg.enc_layers):
            normed = self._norm(f"enc{l}.self.ln", x)
            x = x + self._mha(f"enc{l}.self", normed, normed, None)
            x = x + self._ffn(f"enc{l}.ffn", self._norm(f"enc{l}.ffn.ln", x))
        return self._norm("enc.lnf", x)

    def _encode_labels(self, batch: GraphBatch) -> np.ndarray:
        cfg = self.cfg
        w = self.w
        x = w["tok_emb"][np.asarray(batch.label_token_ids, dtype=np.intp)]
        pos = np.concatenate([sinusoidal_positions(k, cfg.d_model) for k in batch.label_sizes], axis=0)
        x = x + pos + w["seg_emb"][SEG_CURRENT]
        mask = _block_diag_mask(batch.label_sizes, batch.label_sizes) if len(batch.label_sizes) > 1 else None
        for l in range(cfg.enc_layers):
            normed = self._norm(f"enc{l}.self.ln", x)
            x = x + self._mha(f"enc{l}.self", normed, normed, mask)
            x = x + self._ffn(f"enc{l}.ffn", self._norm(f"enc{l}.ffn.ln", x))
        return batch.label_pool @ self._norm("enc.lnf", x)

    def encode_graph(self, batch: GraphBatch) -> np.ndarray:
        cfg = self.cfg
        if batch.n_nodes == 0:
            return np.zeros((0, cfg.d_model))
        w = self.w
        h = self._encode_labels(batch)[batch.node_label]
        dst = batch.edge_dst
        src = batch.edge_src
        for l in range(cfg.gat_layers):
            heads = []
            for k in range(cfg.gat_heads):
                p_dst = h @ w[f"gat{l}.h{k}.w_dst"]
                p_src = h @ w[f"gat{l}.h{k}.w_src"]
                scores = (_leaky(p_dst[dst] + p_src[src]) @ w[f"gat{l}.h{k}.att"])[:, 0]
                shift = np.full(batch.n_nodes, -np.inf)
                np.maximum.at(shift, dst, scores)
                ex = np.exp(scores - shift[dst])
                denom = np.zeros(batch.n_nodes)
                np.add.at(denom, dst, ex)
                alpha = ex / denom[dst]
                agg = np.zeros_like(p_src)
                np.add.at(agg, dst, alpha[:, None] * p_src[src])
                heads.append(_elu(agg))
            h = np.concatenate(heads, axis=1)
        return h

    # -- greedy decoding with cached keys/values ---------------------------------

    def greedy(self, z: np.ndarray, node_states: np.ndarray, max_len: int | None = None) -> list[OutputToken]:
        cfg = self.cfg
        w = self.w
        max_len = max_len or cfg.max_decode_len
        nh = cfg.n_heads
        dh = cfg.d_model // nh
        memory = np.concatenate([z, node_states], axis=0) if node_states.shape[0] else z
        cross_k = {l: memory @ w[f"dec{l}.cross.wk"] for l in range(cfg.dec_layers)}
        cross_v = {l: memory @ w[f"dec{l}.cross.wv"] for l in range(cfg.dec_layers)}
        self_k: dict[int, list[np.ndarray]] = {l: [] for l in range(cfg.dec_layers)}
        self_v: dict[int, list[np.ndarray]] = {l: [] for l in range(cfg.dec_layers)}
        pos = sinusoidal_positions(max_len + 1, cfg.d_model)

        out: list[OutputToken] = []
        prev: OutputToken | None = None
        for step in range(max_len):
            if prev is None:
                row = w["syn_emb"][self._bos]
            elif prev.tag == "syntax":
                row = w["syn_emb"][prev.syntax_id]
            else:
                row = node_states[prev.node_id]
            x = (row + pos[step])[None, :]
            for l in range(cfg.dec_layers):
                normed = self._norm(f"dec{l}.self.ln", x)
                self_k[l].append(normed @ w[f"dec{l}.self.wk"])
                self_v[l].append(normed @ w[f"dec{l}.self.wv"])
                ks = np.concatenate(self_k[l], axis=0)
                vs = np.concatenate(self_v[l], axis=0)
                q = normed @ w[f"dec{l}.self.wq"]
                outs = []
                for hd in range(nh):
                    s = slice(hd * dh, (hd + 1) * dh)
                    att = _softmax(q[:, s] @ ks[:, s].T * (1.0 / math.sqrt(dh)))
                    outs.append(att @ vs[:, s])
                x = x + np.concatenate(outs, axis=1) @ w[f"dec{l}.self.wo"]
                qc = self._norm(f"dec{l}.cross.ln", x) @ w[f"dec{l}.cross.wq"]
                outs = []
                for hd in range(nh):
                    s = slice(hd * dh, (hd + 1) * dh)
                    att = _softmax(qc[:, s] @ cross_k[l][:, s].T * (1.0 / math.sqrt(dh)))
                    outs.append(att @ cross_v[l][:, s])
                x = x + np.concatenate(outs, axis=1) @ w[f"dec{l}.cross.wo"]
                x = x + self._ffn(f"dec{l}.ffn", self._norm(f"dec{l}.ffn.ln", x))
            s_i = self._norm("dec.lnf", x)[0]
            logits = s_i @ w["w1"].T
            if node_states.shape[0]:
                logits = np.concatenate([logits, s_i @ node_states.T])
            idx = int(np.argmax(logits))
            if idx < self.n_syntax:
                if idx == self._eoq:
                    break
                prev = OutputToken(tag="syntax", syntax_id=idx)
            else:
                prev = OutputToken(tag="node", node_id=idx - self.n_syntax)
            out.append(prev)
        return out
