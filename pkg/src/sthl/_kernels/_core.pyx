# cython: language_level=3
"""Compiled hypergraph kernels.

Loop-fused twins of ``_reference``. All arrays are float64 and C-contiguous;
index arrays are int64. Loops release the GIL.
"""
import numpy as np
from libc.math cimport sqrt, exp


def reconstruct_forward(const double[:, :, ::1] proj, const double[:, ::1] coef,
                        const long long[:, ::1] cand, const double[:, :, ::1] feats):
    cdef Py_ssize_t B = proj.shape[0], N = proj.shape[1], d = proj.shape[2]
    cdef Py_ssize_t M = coef.shape[1]
    cdef Py_ssize_t b, i, m, j
    cdef long long src
    cdef double c, acc
    resid_arr = np.empty((B, N, d))
    norm_arr = np.empty((B, N))
    cdef double[:, :, ::1] resid = resid_arr
    cdef double[:, ::1] norm = norm_arr
    with nogil:
        for b in range(B):
            for i in range(N):
                for j in range(d):
                    resid[b, i, j] = proj[b, i, j]
                for m in range(M):
                    c = coef[i, m]
                    src = cand[i, m]
                    for j in range(d):
                        resid[b, i, j] -= c * feats[b, src, j]
                acc = 0.0
                for j in range(d):
                    acc += resid[b, i, j] * resid[b, i, j]
                norm[b, i] = sqrt(acc)
    return resid_arr, norm_arr


def reconstruct_backward(const double[:, ::1] dnorm, const double[:, :, ::1] resid,
                         const double[:, ::1] norm, const double[:, ::1] coef,
                         const long long[:, ::1] cand, const double[:, :, ::1] feats):
    cdef Py_ssize_t B = resid.shape[0], N = resid.shape[1], d = resid.shape[2]
    cdef Py_ssize_t M = coef.shape[1]
    cdef Py_ssize_t b, i, m, j
    cdef long long src
    cdef double s, acc
    dproj_arr = np.zeros((B, N, d))
    dcoef_arr = np.zeros((N, M))
    cdef double[:, :, ::1] dproj = dproj_arr
    cdef double[:, ::1] dcoef = dcoef_arr
    with nogil:
        for b in range(B):
            for i in range(N):
                if norm[b, i] <= 0.0:
                    continue
                s = dnorm[b, i] / norm[b, i]
                for j in range(d):
                    dproj[b, i, j] = s * resid[b, i, j]
                for m in range(M):
                    src = cand[i, m]
                    acc = 0.0
                    for j in range(d):
                        acc += dproj[b, i, j] * feats[b, src, j]
                    dcoef[i, m] -= acc
    return dproj_arr, dcoef_arr


def aggregate_forward(const double[:, ::1] incidence, const double[:, :, ::1] feats):
    cdef Py_ssize_t V = incidence.shape[0], E = incidence.shape[1]
    cdef Py_ssize_t B = feats.shape[0], d = feats.shape[2]
    cdef Py_ssize_t b, v, e, j
    cdef double h, inv
    denom_arr = np.zeros(E)
    emb_arr = np.zeros((B, E, d))
    cdef double[::1] denom = denom_arr
    cdef double[:, :, ::1] emb = emb_arr
    with nogil:
        for v in range(V):
            for e in range(E):
                denom[e] += incidence[v, e]
        for b in range(B):
            for e in range(E):
                for v in range(V):
                    h = incidence[v, e]
                    if h == 0.0:
                        continue
                    for j in range(d):
                        emb[b, e, j] += h * feats[b, v, j]
                inv = 1.0 / denom[e]
                for j in range(d):
                    emb[b, e, j] *= inv
    return emb_arr, denom_arr


def aggregate_backward(const double[:, :, ::1] demb, const double[:, ::1] incidence,
                       const double[:, :, ::1] feats, const double[:, :, ::1] emb,
                       const double[::1] denom):
    cdef Py_ssize_t V = incidence.shape[0], E = incidence.shape[1]
    cdef Py_ssize_t B = feats.shape[0], d = feats.shape[2]
    cdef Py_ssize_t b, v, e, j
    cdef double acc
    dinc_arr = np.zeros((V, E))
    cdef double[:, ::1] dinc = dinc_arr
    with nogil:
        for v in range(V):
            for e in range(E):
                acc = 0.0
                for b in range(B):
                    for j in range(d):
                        acc += demb[b, e, j] * (feats[b, v, j] - emb[b, e, j])
                dinc[v, e] = acc / denom[e]
    return dinc_arr


cdef inline double _sigmoid(double x) nogil:
    cdef double ex
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    ex = exp(x)
    return ex / (1.0 + ex)


def attend_forward(const double[:, :, :, ::1] query, const double[:, :, :, ::1] key_spa,
                   const double[:, :, :, ::1] key_tem, const double[:, :, ::1] theta_spa,
                   const double[:, :, ::1] theta_tem, double scale):
    cdef Py_ssize_t B = query.shape[0], N = query.shape[1]
    cdef Py_ssize_t K = query.shape[2], k = query.shape[3]
    cdef Py_ssize_t b, n, h, p, q
    cdef double s_spa, s_tem, ts, tt, w
    w_arr = np.empty((B, N, K))
    mixed_arr = np.empty((B, N, K, k))
    cdef double[:, :, ::1] w_spa = w_arr
    cdef double[:, :, :, ::1] mixed = mixed_arr
    with nogil:
        for b in range(B):
            for n in range(N):
                for h in range(K):
                    s_spa = 0.0
                    s_tem = 0.0
                    for p in range(k):
                        ts = 0.0
                        tt = 0.0
                        for q in range(k):
                            ts += theta_spa[h, p, q] * key_spa[b, n, h, q]
                            tt += theta_tem[h, p, q] * key_tem[b, n, h, q]
                        s_spa += query[b, n, h, p] * ts
                        s_tem += query[b, n, h, p] * tt
                    w = _sigmoid(scale * (s_spa - s_tem))
                    w_spa[b, n, h] = w
                    for p in range(k):
                        mixed[b, n, h, p] = w * key_spa[b, n, h, p] + (1.0 - w) * key_tem[b, n, h, p]
    return w_arr, mixed_arr


def attend_backward(const double[:, :, :, ::1] dmixed, const double[:, :, :, ::1] query,
                    const double[:, :, :, ::1] key_spa, const double[:, :, :, ::1] key_tem,
                    const double[:, :, ::1] theta_spa, const double[:, :, ::1] theta_tem,
                    const double[:, :, ::1] w_spa, double scale):
    cdef Py_ssize_t B = query.shape[0], N = query.shape[1]
    cdef Py_ssize_t K = query.shape[2], k = query.shape[3]
    cdef Py_ssize_t b, n, h, p, q
    cdef double w, dw, ds, ts, tt, qs, qt
    dq_arr = np.zeros((B, N, K, k))
    dks_arr = np.zeros((B, N, K, k))
    dkt_arr = np.zeros((B, N, K, k))
    dts_arr = np.zeros((K, k, k))
    dtt_arr = np.zeros((K, k, k))
    cdef double[:, :, :, ::1] dq = dq_arr
    cdef double[:, :, :, ::1] dks = dks_arr
    cdef double[:, :, :, ::1] dkt = dkt_arr
    cdef double[:, :, ::1] dts = dts_arr
    cdef double[:, :, ::1] dtt = dtt_arr
    with nogil:
        for b in range(B):
            for n in range(N):
                for h in range(K):
                    w = w_spa[b, n, h]
                    dw = 0.0
                    for p in range(k):
                        dw += dmixed[b, n, h, p] * (key_spa[b, n, h, p] - key_tem[b, n, h, p])
                    ds = w * (1.0 - w) * dw * scale
                    for p in range(k):
                        ts = 0.0
                        tt = 0.0
                        qs = 0.0
                        qt = 0.0
                        for q in range(k):
                            ts += theta_spa[h, p, q] * key_spa[b, n, h, q]
                            tt += theta_tem[h, p, q] * key_tem[b, n, h, q]
                            qs += theta_spa[h, q, p] * query[b, n, h, q]
                            qt += theta_tem[h, q, p] * query[b, n, h, q]
                        dq[b, n, h, p] = ds * (ts - tt)
                        dks[b, n, h, p] = w * dmixed[b, n, h, p] + ds * qs
                        dkt[b, n, h, p] = (1.0 - w) * dmixed[b, n, h, p] - ds * qt
                        for q in range(k):
                            dts[h, p, q] += ds * query[b, n, h, p] * key_spa[b, n, h, q]
                            dtt[h, p, q] -= ds * query[b, n, h, p] * key_tem[b, n, h, q]
    return dq_arr, dks_arr, dkt_arr, dts_arr, dtt_arr
