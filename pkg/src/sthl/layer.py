"""Attentive hypergraph message passing.

Hyperedge embeddings are incidence-weighted means of member features. Each
master attends, per head, over its spatial and temporal hyperedge with a
scaled bilinear score; the two-way softmax weights mix the projected keys,
heads are concatenated and passed through a shallow MLP. The graph
representation is the mean over current-timestamp nodes.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .construction import SPATIAL, TEMPORAL
from .numerics import activate, activate_backward


@dataclass
class MLPParams:
    """Feed-forward stack; ``weights[l]`` has shape (in, out). The activation
    sits between layers, never after the last one."""

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("MLP needs one bias per weight and at least one layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[1],):
                raise ValueError(f"layer {l}: bias shape {b.shape} vs weight {W.shape}")
            if l and self.weights[l - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {l} input {W.shape[0]} does not chain "
                                 f"from output {self.weights[l - 1].shape[1]}")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @classmethod
    def identity(cls, d):
        return cls([np.eye(d)], [np.zeros(d)])


def mlp_forward(mlp, x):
    """Returns the output and the per-layer cache ``[(input, pre, post)]``."""
    cache = []
    h = x
    last = len(mlp.weights) - 1
    for l, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        pre = h @ W + b
        post = pre if l == last else activate(mlp.activation, pre)
        cache.append((h, pre, post))
        h = post
    return h, cache


def mlp_backward(mlp, dout, cache):
    """Returns (d input, [dW], [db])."""
    L = len(mlp.weights)
    dWs, dbs = [None] * L, [None] * L
    g = dout
    for l in range(L - 1, -1, -1):
        h, pre, post = cache[l]
        if l != L - 1:
            g = activate_backward(mlp.activation, g, pre, post)
        g2 = g.reshape(-1, g.shape[-1])
        dWs[l] = h.reshape(-1, h.shape[-1]).T @ g2
        dbs[l] = g2.sum(axis=0)
        g = g @ mlp.weights[l].T
    return g, dWs, dbs


@dataclass
class AttentionParams:
    q_lin: np.ndarray  # (K, d, d/K)
    k_lin_spa: np.ndarray  # (K, d, d/K)
    k_lin_tem: np.ndarray  # (K, d, d/K)
    theta_att_spa: np.ndarray  # (K, d/K, d/K)
    theta_att_tem: np.ndarray  # (K, d/K, d/K)
    update_mlp: MLPParams = field(default=None)

    @property
    def num_heads(self):
        return self.q_lin.shape[0]

    @property
    def d(self):
        return self.q_lin.shape[1]

    def key_lin(self, kind):
        return self.k_lin_spa if kind == SPATIAL else self.k_lin_tem

    def theta(self, kind):
        return self.theta_att_spa if kind == SPATIAL else self.theta_att_tem


# per-sample reference operations


def hyperedge_embedding(snapshot, node_feats, edge):
    """``sum_v H[v, e] X[v] / sum_v H[v, e]`` for one edge column."""
    col = snapshot.incidence[:, edge]
    denom = col.sum()
    assert denom != 0.0, f"hyperedge {edge} has zero incidence mass"
    return col @ node_feats / denom


def attention_score(master_feat, edge_emb, head, kind, params):
    d = params.d
    if master_feat.shape != (d,) or edge_emb.shape != (d,):
        raise ValueError(f"expected length-{d} vectors, got {master_feat.shape}, {edge_emb.shape}")
    q = master_feat @ params.q_lin[head]
    k = edge_emb @ params.key_lin(kind)[head]
    return float(q @ params.theta(kind)[head] @ k / np.sqrt(d))


def edge_weights(score_spa, score_tem):
    m = max(score_spa, score_tem)
    a, b = np.exp(score_spa - m), np.exp(score_tem - m)
    return a / (a + b), b / (a + b)


def update_node(master, snapshot, node_feats, params):
    """Updated embedding of one current-timestamp master channel."""
    i = master if isinstance(master, (int, np.integer)) else master.channel
    x = node_feats[i]
    e_spa = hyperedge_embedding(snapshot, node_feats, snapshot.edge_index(SPATIAL, i))
    e_tem = hyperedge_embedding(snapshot, node_feats, snapshot.edge_index(TEMPORAL, i))
    heads = []
    for h in range(params.num_heads):
        w_spa, w_tem = edge_weights(attention_score(x, e_spa, h, SPATIAL, params),
                                    attention_score(x, e_tem, h, TEMPORAL, params))
        k_spa = e_spa @ params.k_lin_spa[h]
        k_tem = e_tem @ params.k_lin_tem[h]
        heads.append(w_spa * k_spa + w_tem * k_tem)
    out, _ = mlp_forward(params.update_mlp, np.concatenate(heads))
    return out


def readout(z):
    """Mean over the node axis (-2).

    Each column is sorted before summation, so the result depends only on
    the multiset of node rows and is bitwise invariant to node order.
    """
    z = np.asarray(z, dtype=np.float64)
    return np.sort(z, axis=-2).sum(axis=-2) / z.shape[-2]


# batched path used for training


def attentive_update_forward(x_cur, e_spa, e_tem, params):
    """Batched attentive mix. Inputs (B, N, d); returns (U, cache) with U (B, N, d)."""
    B, N, d = x_cur.shape
    query = np.einsum("bnd,hdk->bnhk", x_cur, params.q_lin)
    key_spa = np.einsum("bnd,hdk->bnhk", e_spa, params.k_lin_spa)
    key_tem = np.einsum("bnd,hdk->bnhk", e_tem, params.k_lin_tem)
    scale = 1.0 / np.sqrt(d)
    w_spa, mixed = _kernels.attend_forward(
        query, key_spa, key_tem, params.theta_att_spa, params.theta_att_tem, scale)
    cache = (x_cur, e_spa, e_tem, query, key_spa, key_tem, w_spa, scale)
    return mixed.reshape(B, N, d), cache


def attentive_update_backward(dU, cache, params):
    """Returns (d e_spa, d e_tem, grads dict keyed by attention field name)."""
    x_cur, e_spa, e_tem, query, key_spa, key_tem, w_spa, scale = cache
    dmixed = np.ascontiguousarray(dU.reshape(query.shape))
    dq, dks, dkt, dts, dtt = _kernels.attend_backward(
        dmixed, query, key_spa, key_tem, params.theta_att_spa, params.theta_att_tem,
        w_spa, scale)
    grads = {
        "q_lin": np.einsum("bnd,bnhk->hdk", x_cur, dq),
        "k_lin_spa": np.einsum("bnd,bnhk->hdk", e_spa, dks),
        "k_lin_tem": np.einsum("bnd,bnhk->hdk", e_tem, dkt),
        "theta_att_spa": dts,
        "theta_att_tem": dtt,
    }
    de_spa = np.einsum("bnhk,hdk->bnd", dks, params.k_lin_spa)
    de_tem = np.einsum("bnhk,hdk->bnd", dkt, params.k_lin_tem)
    return de_spa, de_tem, grads


def attention_csv_rows(w_spa, sample_ids=None):
    """Flatten (B, N, K) spatial weights into dump rows."""
    B, N, K = w_spa.shape
    ids = range(B) if sample_ids is None else sample_ids
    rows = [["sample", "master", "head", "w_spatial", "w_temporal"]]
    for b, sid in zip(range(B), ids):
        for n in range(N):
            for h in range(K):
                w = float(w_spa[b, n, h])
                rows.append([sid, n, h, repr(w), repr(1.0 - w)])
    return rows
