"""End-to-end model: construction, attentive update, readout, classifier.

Three variants share this module:

``default``
    learnable hyperedges and per-head attentive mixing.
``no_attention``
    hyperedges kept; the update input is the plain mean of a master's
    spatial and temporal hyperedge embeddings.
``no_hyperedge``
    hyperedges replaced by a Pearson-correlation graph convolution; the
    temporal update is a learned convex mix of the convolved current and
    previous timestamps. There is no construction loss.
"""
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .construction import (
    DEFAULT_GAMMA,
    DEFAULT_LAMBDA,
    ConstructionParams,
    build_snapshot,
    candidate_table,
    incidence_backward,
    incidence_matrix,
    temporal_table,
)
from .layer import (
    AttentionParams,
    MLPParams,
    attentive_update_backward,
    attentive_update_forward,
    mlp_backward,
    mlp_forward,
    readout,
)
from .numerics import (
    ParamStore,
    glorot_uniform,
    l1_norm,
    l1_norm_backward,
    l2_norm,
    l2_norm_backward,
    logsumexp,
    row_softmax,
    sigmoid,
)

VARIANTS = ("default", "no_attention", "no_hyperedge")
DEFAULT_ALPHA = 0.1
CHECKPOINT_MAGIC = b"STHLCKPT"


@dataclass
class ModelConfig:
    N: int
    d: int
    C: int
    K: int = 2
    lam: float = DEFAULT_LAMBDA
    gamma: float = DEFAULT_GAMMA
    alpha: float = DEFAULT_ALPHA
    classifier_hidden: list = field(default=None)
    update_hidden: list = field(default=None)
    activation: str = "tanh"
    rng_seed: int = 0

    def __post_init__(self):
        if self.classifier_hidden is None:
            self.classifier_hidden = [self.d]
        if self.update_hidden is None:
            self.update_hidden = [self.d]
        self.classifier_hidden = [int(v) for v in self.classifier_hidden]
        self.update_hidden = [int(v) for v in self.update_hidden]
        self.validate()

    def validate(self):
        if self.N < 2 or self.d < 1 or self.C < 1:
            raise ValueError(f"invalid sizes N={self.N}, d={self.d}, C={self.C}")
        if self.K < 1 or self.d % self.K:
            raise ValueError(f"number of heads K={self.K} must divide d={self.d}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be nonnegative")
        if any(h < 1 for h in self.classifier_hidden + self.update_hidden):
            raise ValueError("hidden layer widths must be positive")

    def to_dict(self):
        return asdict(self)


class SthlModel:
    def __init__(self, config, store, variant="default"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.config = config
        self.store = store
        self.variant = variant

    @property
    def has_hyperedges(self):
        return self.variant != "no_hyperedge"

    @property
    def has_attention(self):
        return self.variant == "default"

    @property
    def construction(self):
        if not self.has_hyperedges:
            return None
        s = self.store
        return ConstructionParams(s["construction.theta_spa"], s["construction.theta_tem"],
                                  s["construction.p_spa"], s["construction.p_tem"])

    def _mlp(self, prefix):
        n = sum(1 for name in self.store if name.startswith(prefix + ".w"))
        return MLPParams([self.store[f"{prefix}.w{l}"] for l in range(n)],
                         [self.store[f"{prefix}.b{l}"] for l in range(n)],
                         self.config.activation)

    @property
    def update_mlp(self):
        return self._mlp("update")

    @property
    def classifier(self):
        return self._mlp("classifier")

    @property
    def attention(self):
        if not self.has_attention:
            return None
        s = self.store
        return AttentionParams(s["attention.q_lin"], s["attention.k_lin_spa"],
                               s["attention.k_lin_tem"], s["attention.theta_att_spa"],
                               s["attention.theta_att_tem"], self.update_mlp)

    def copy(self):
        return SthlModel(self.config, self.store.copy(), self.variant)


def _register_mlp(store, rng, prefix, sizes):
    for l, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.register(f"{prefix}.w{l}", glorot_uniform(rng, a, b))
        store.register(f"{prefix}.b{l}", np.zeros(b))


def init_model(config, variant="default"):
    """Seeded initialisation; coefficient banks start uniform and positive so
    every candidate is initially a slave."""
    config.validate()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(config.rng_seed)
    N, d, K = config.N, config.d, config.K
    dk = d // K
    store = ParamStore()
    if variant != "no_hyperedge":
        store.register("construction.theta_spa", glorot_uniform(rng, d, d))
        store.register("construction.theta_tem", glorot_uniform(rng, d, d))
        store.register("construction.p_spa", np.full((N, N - 1), 1.0 / (N - 1)))
        store.register("construction.p_tem", np.full((N, N), 1.0 / N))
    if variant == "default":
        store.register("attention.q_lin", glorot_uniform(rng, d, dk, (K, d, dk)))
        store.register("attention.k_lin_spa", glorot_uniform(rng, d, dk, (K, d, dk)))
        store.register("attention.k_lin_tem", glorot_uniform(rng, d, dk, (K, d, dk)))
        store.register("attention.theta_att_spa", glorot_uniform(rng, dk, dk, (K, dk, dk)))
        store.register("attention.theta_att_tem", glorot_uniform(rng, dk, dk, (K, dk, dk)))
    if variant == "no_hyperedge":
        store.register("gcn.weight", glorot_uniform(rng, d, d))
        store.register("gcn.mix", np.zeros(1))
    _register_mlp(store, rng, "update", [d] + config.update_hidden + [d])
    _register_mlp(store, rng, "classifier", [d] + config.classifier_hidden + [config.C])
    return SthlModel(config, store, variant)


def make_variant(model, variant):
    """Variant sharing the update MLP and classifier of ``model``; slots the
    source lacks are freshly initialised from the model seed."""
    fresh = init_model(model.config, variant)
    for name in fresh.store:
        if name in model.store and model.store[name].shape == fresh.store[name].shape:
            fresh.store[name][...] = model.store[name]
    return fresh


def ablate_no_hyperedge(model):
    return make_variant(model, "no_hyperedge")


def ablate_no_attention(model):
    return make_variant(model, "no_attention")


# Pearson graph for the no_hyperedge variant


def pearson_adjacency(feats):
    """Pearson correlation between channel feature rows, (..., N, d) -> (..., N, N).

    Entries involving a zero-variance channel are 0.
    """
    centred = feats - feats.mean(axis=-1, keepdims=True)
    norm = np.sqrt((centred * centred).sum(axis=-1))
    ok = norm > 1e-12 * (1.0 + np.abs(feats).max(axis=-1))
    unit = np.where(ok[..., None], centred / np.where(ok, norm, 1.0)[..., None], 0.0)
    return np.clip(unit @ np.swapaxes(unit, -1, -2), -1.0, 1.0)


def propagation_matrix(adj):
    """Self-loops forced to 1, rows scaled to unit absolute mass."""
    a = adj.copy()
    idx = np.arange(a.shape[-1])
    a[..., idx, idx] = 1.0
    return a / np.abs(a).sum(axis=-1, keepdims=True)


# forward / backward


def _as_batch(cur, prev):
    cur = np.ascontiguousarray(cur, dtype=np.float64)
    prev = np.ascontiguousarray(prev, dtype=np.float64)
    if cur.ndim == 2:
        cur, prev = cur[None], prev[None]
    if cur.shape != prev.shape:
        raise ValueError(f"current {cur.shape} and previous {prev.shape} differ")
    return cur, prev


def _check_shapes(model, cur):
    _, N, d = cur.shape
    if (N, d) != (model.config.N, model.config.d):
        raise ValueError(f"input has N={N}, d={d}; model expects "
                         f"N={model.config.N}, d={model.config.d}")


def forward_batch(model, cur, prev):
    """Batched forward. Returns (logits (B, C), recon (B,), cache)."""
    cur, prev = _as_batch(cur, prev)
    _check_shapes(model, cur)
    cfg = model.config
    B, N, _ = cur.shape
    cache = {"cur": cur, "prev": prev}

    if model.has_hyperedges:
        cp = model.construction
        proj_s = cur @ cp.theta_spa
        proj_t = cur @ cp.theta_tem
        rs, cs = _kernels.reconstruct_forward(proj_s, cp.p_spa, candidate_table(N), cur)
        rt, ct = _kernels.reconstruct_forward(proj_t, cp.p_tem, temporal_table(N), prev)
        ns, nt = l2_norm(cp.p_spa), l2_norm(cp.p_tem)
        reg = (l1_norm(cp.p_spa).sum() + l1_norm(cp.p_tem).sum()
               + cfg.gamma * (ns.sum() + nt.sum()))
        recon = cfg.lam * (cs.sum(axis=1) + ct.sum(axis=1)) + reg

        H = incidence_matrix(cp.p_spa, cp.p_tem)
        nodes = np.concatenate([cur, prev], axis=1)
        emb, denom = _kernels.aggregate_forward(H, nodes)
        e_spa, e_tem = emb[:, :N], emb[:, N:]
        cache.update(rs=rs, cs=cs, rt=rt, ct=ct, ns=ns, nt=nt, H=H, nodes=nodes,
                     emb=emb, denom=denom, e_spa=e_spa, e_tem=e_tem)
        if model.has_attention:
            U, att_cache = attentive_update_forward(cur, e_spa, e_tem, model.attention)
            cache["att"] = att_cache
            cache["w_spa"] = att_cache[6]
        else:
            U = 0.5 * (e_spa + e_tem)
    else:
        W = model.store["gcn.weight"]
        beta = float(sigmoid(model.store["gcn.mix"][0]))
        P_c = propagation_matrix(pearson_adjacency(cur))
        P_p = propagation_matrix(pearson_adjacency(prev))
        agg_c, agg_p = P_c @ cur, P_p @ prev
        s_c, s_p = agg_c @ W, agg_p @ W
        U = beta * s_c + (1.0 - beta) * s_p
        recon = np.zeros(B)
        cache.update(beta=beta, agg_c=agg_c, agg_p=agg_p, s_c=s_c, s_p=s_p)

    Z, upd_cache = mlp_forward(model.update_mlp, U)
    G = readout(Z)
    logits, cls_cache = mlp_forward(model.classifier, G)
    cache.update(U=U, Z=Z, G=G, upd=upd_cache, cls=cls_cache)
    return logits, recon, cache


def cross_entropy(logits, labels):
    """Per-row ``logsumexp(logits) - logits[label]``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    C = logits.shape[-1]
    if np.any((labels < 0) | (labels >= C)):
        raise ValueError(f"labels {labels.tolist()} outside [0, {C})")
    return logsumexp(logits) - logits[np.arange(len(labels)), labels]


def total_loss(logits, label, recon_loss, alpha=DEFAULT_ALPHA):
    """``alpha * recon + (1 - alpha) * CE`` for one sample."""
    ce = float(cross_entropy(np.asarray(logits, dtype=np.float64), int(label))[0])
    return alpha * recon_loss + (1.0 - alpha) * ce


def forward(model, pair):
    """Single-sample forward: (logits (C,), recon_loss, snapshot)."""
    logits, recon, _ = forward_batch(model, pair.current, pair.previous)
    if model.has_hyperedges:
        snapshot = build_snapshot(pair, model.construction)
    else:
        snapshot = None
    return logits[0], float(recon[0]), snapshot


def batch_loss(model, cur, prev, labels, alpha=None):
    alpha = model.config.alpha if alpha is None else alpha
    logits, recon, _ = forward_batch(model, cur, prev)
    return float(np.mean(alpha * recon + (1.0 - alpha) * cross_entropy(logits, labels)))


def loss_and_grad(model, cur, prev, labels, alpha=None):
    """Mean batch loss; gradients are accumulated into ``model.store``."""
    alpha = model.config.alpha if alpha is None else alpha
    cfg = model.config
    store = model.store
    logits, recon, cache = forward_batch(model, cur, prev)
    labels = np.asarray(labels, dtype=np.int64)
    ce = cross_entropy(logits, labels)
    B, N, _ = cache["cur"].shape
    loss = float(np.mean(alpha * recon + (1.0 - alpha) * ce))

    dlogits = row_softmax(logits)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits *= (1.0 - alpha) / B

    dG, dWs, dbs = mlp_backward(model.classifier, dlogits, cache["cls"])
    for l, (dW, db) in enumerate(zip(dWs, dbs)):
        store.accumulate(f"classifier.w{l}", dW)
        store.accumulate(f"classifier.b{l}", db)
    dZ = np.broadcast_to(dG[:, None, :] / N, cache["Z"].shape)
    dU, dWs, dbs = mlp_backward(model.update_mlp, dZ, cache["upd"])
    for l, (dW, db) in enumerate(zip(dWs, dbs)):
        store.accumulate(f"update.w{l}", dW)
        store.accumulate(f"update.b{l}", db)

    if not model.has_hyperedges:
        beta = cache["beta"]
        W = store["gcn.weight"]
        ds_c, ds_p = beta * dU, (1.0 - beta) * dU
        dW = (cache["agg_c"].reshape(-1, cfg.d).T @ ds_c.reshape(-1, cfg.d)
              + cache["agg_p"].reshape(-1, cfg.d).T @ ds_p.reshape(-1, cfg.d))
        dbeta = float(np.sum(dU * (cache["s_c"] - cache["s_p"])))
        store.accumulate("gcn.weight", dW)
        store.accumulate("gcn.mix", np.array([dbeta * beta * (1.0 - beta)]))
        return loss

    cp = model.construction
    if model.has_attention:
        de_spa, de_tem, grads = attentive_update_backward(dU, cache["att"], model.attention)
        for k, g in grads.items():
            store.accumulate(f"attention.{k}", g)
    else:
        de_spa = de_tem = 0.5 * dU
    demb = np.concatenate([de_spa, de_tem], axis=1)
    dH = _kernels.aggregate_backward(demb, cache["H"], cache["nodes"], cache["emb"],
                                     cache["denom"])
    dps, dpt = incidence_backward(dH, cp.p_spa, cp.p_tem)

    drec = np.full((B, N), cfg.lam * alpha / B)
    dproj_s, dps_rec = _kernels.reconstruct_backward(
        drec, cache["rs"], cache["cs"], cp.p_spa, candidate_table(N), cache["cur"])
    dproj_t, dpt_rec = _kernels.reconstruct_backward(
        drec, cache["rt"], cache["ct"], cp.p_tem, temporal_table(N), cache["prev"])
    x = cache["cur"].reshape(-1, cfg.d)
    store.accumulate("construction.theta_spa", x.T @ dproj_s.reshape(-1, cfg.d))
    store.accumulate("construction.theta_tem", x.T @ dproj_t.reshape(-1, cfg.d))

    # regulariser is sample-independent; its batch-mean weight is alpha
    ones_n = np.full(N, alpha)
    dps_reg = (l1_norm_backward(ones_n, cp.p_spa)
               + cfg.gamma * l2_norm_backward(ones_n, cp.p_spa, cache["ns"]))
    dpt_reg = (l1_norm_backward(ones_n, cp.p_tem)
               + cfg.gamma * l2_norm_backward(ones_n, cp.p_tem, cache["nt"]))
    store.accumulate("construction.p_spa", dps + dps_rec + dps_reg)
    store.accumulate("construction.p_tem", dpt + dpt_rec + dpt_reg)
    return loss


def predict(model, cur, prev):
    logits, _, _ = forward_batch(model, cur, prev)
    return np.argmax(logits, axis=1)


# checkpoint


def save_checkpoint(model, path, extra=None):
    """Magic, length-prefixed JSON config block, then every slot in registry order."""
    meta = {"model": model.config.to_dict(), "variant": model.variant,
            "slots": [[n, list(model.store.shape(n))] for n in model.store]}
    if extra:
        meta.update(extra)
    block = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        for name in model.store:
            fh.write(model.store[name].astype("<f8").tobytes())


def read_checkpoint_meta(path):
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<I", raw, off)
    meta = json.loads(raw[off + 4: off + 4 + n])
    return meta, raw, off + 4 + n


def load_checkpoint(path):
    meta, raw, off = read_checkpoint_meta(path)
    model = init_model(ModelConfig(**meta["model"]), meta["variant"])
    slots = meta["slots"]
    if [s[0] for s in slots] != model.store.names():
        raise ValueError(f"{path}: slot layout does not match variant {meta['variant']!r}")
    for name, shape in slots:
        size = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        model.store[name][...] = arr
        off += 8 * size
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return model
