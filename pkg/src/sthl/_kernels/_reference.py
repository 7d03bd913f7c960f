"""Pure-numpy implementations of the hot hypergraph kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature and the same output layout. Inputs are float64 C-contiguous.
"""
import numpy as np


def reconstruct_forward(proj, coef, cand, feats):
    """Residuals ``proj[b, i] - sum_k coef[i, k] * feats[b, cand[i, k]]`` and their l2 norms.

    proj: (B, N, d), coef: (N, M), cand: (N, M) int64, feats: (B, S, d).
    Returns residual (B, N, d) and norm (B, N).
    """
    gathered = feats[:, cand, :]  # (B, N, M, d)
    resid = proj - np.einsum("nm,bnmd->bnd", coef, gathered)
    norm = np.sqrt(np.einsum("bnd,bnd->bn", resid, resid))
    return resid, norm


def reconstruct_backward(dnorm, resid, norm, coef, cand, feats):
    """Gradients w.r.t. ``proj`` and ``coef``; the norm gradient is 0 at the origin."""
    safe = np.where(norm > 0.0, norm, 1.0)
    scale = np.where(norm > 0.0, dnorm / safe, 0.0)
    dproj = resid * scale[:, :, None]
    gathered = feats[:, cand, :]
    dcoef = -np.einsum("bnd,bnmd->nm", dproj, gathered)
    return dproj, dcoef


def aggregate_forward(incidence, feats):
    """Incidence-weighted mean of node features for every hyperedge.

    incidence: (V, E), feats: (B, V, d). Returns embeddings (B, E, d) and
    column sums (E,).
    """
    denom = incidence.sum(axis=0)
    emb = np.einsum("ve,bvd->bed", incidence, feats) / denom[None, :, None]
    return emb, denom


def aggregate_backward(demb, incidence, feats, emb, denom):
    """Gradient w.r.t. every incidence entry (features are data, not parameters)."""
    num = np.einsum("bed,bvd->ve", demb, feats)
    corr = np.einsum("bed,bed->e", demb, emb)
    return (num - corr[None, :]) / denom[None, :]


def attend_forward(query, key_spa, key_tem, theta_spa, theta_tem, scale):
    """Per-head two-way softmax over bilinear scores, then weighted key mix.

    query, key_spa, key_tem: (B, N, K, k); theta_*: (K, k, k).
    Returns spatial weights (B, N, K) and mixed keys (B, N, K, k).
    """
    s_spa = scale * np.einsum("bnhk,hkl,bnhl->bnh", query, theta_spa, key_spa)
    s_tem = scale * np.einsum("bnhk,hkl,bnhl->bnh", query, theta_tem, key_tem)
    w_spa = _sigmoid(s_spa - s_tem)
    mixed = w_spa[..., None] * key_spa + (1.0 - w_spa)[..., None] * key_tem
    return w_spa, mixed


def attend_backward(dmixed, query, key_spa, key_tem, theta_spa, theta_tem, w_spa, scale):
    """Gradients of the attentive mix w.r.t. query, both keys and both bilinear maps."""
    w_tem = 1.0 - w_spa
    dw = np.einsum("bnhk,bnhk->bnh", dmixed, key_spa - key_tem)
    ds = w_spa * w_tem * dw * scale  # d/ds_spa; d/ds_tem is its negative

    dkey_spa = w_spa[..., None] * dmixed
    dkey_tem = w_tem[..., None] * dmixed

    tk_spa = np.einsum("hkl,bnhl->bnhk", theta_spa, key_spa)
    tk_tem = np.einsum("hkl,bnhl->bnhk", theta_tem, key_tem)
    dquery = ds[..., None] * (tk_spa - tk_tem)

    dkey_spa += ds[..., None] * np.einsum("hkl,bnhk->bnhl", theta_spa, query)
    dkey_tem -= ds[..., None] * np.einsum("hkl,bnhk->bnhl", theta_tem, query)

    dtheta_spa = np.einsum("bnh,bnhk,bnhl->hkl", ds, query, key_spa)
    dtheta_tem = -np.einsum("bnh,bnhk,bnhl->hkl", ds, query, key_tem)
    return dquery, dkey_spa, dkey_tem, dtheta_spa, dtheta_tem


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
