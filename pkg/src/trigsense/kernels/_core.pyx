# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot numeric kernels.

Same contract as trigsense.kernels._pure; selected at import time when the
extension built. Loops are written out so no temporary matrices are
allocated inside the attention inner loop.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

POOL_MEAN = 0
POOL_LAST = 1


def bigram_logprob_sum(tokens, log_init, log_trans):
    """Log-probability of a token sequence under a first-order chain."""
    cdef cnp.int64_t[::1] t = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef double[::1] li = np.ascontiguousarray(log_init, dtype=np.float64)
    cdef double[:, ::1] lt = np.ascontiguousarray(log_trans, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0]
    cdef Py_ssize_t i
    cdef double total = li[t[0]]
    for i in range(1, n):
        total += lt[t[i - 1], t[i]]
    return total


cdef void _softmax_rows(double[:, ::1] scores, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(n):
        m = scores[i, 0]
        for j in range(1, n):
            if scores[i, j] > m:
                m = scores[i, j]
        s = 0.0
        for j in range(n):
            scores[i, j] = exp(scores[i, j] - m)
            s += scores[i, j]
        for j in range(n):
            scores[i, j] /= s


cdef void _matmul(double[:, ::1] out, double[:, ::1] a, double[:, ::1] bmat,
                  Py_ssize_t n, Py_ssize_t k, Py_ssize_t m) noexcept nogil:
    # out[n, m] = a[n, k] @ bmat[k, m]
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * bmat[p, j]
            out[i, j] = acc


def attn_forward(H, Wq, Wk, Wv, Wo, b, int pool_mode):
    """Single-layer multi-head attention with a pooled linear head.

    Returns (logits, attention) where attention has shape (heads, n, n).
    """
    cdef double[:, ::1] Hm = np.ascontiguousarray(H, dtype=np.float64)
    cdef double[:, :, ::1] Wqm = np.ascontiguousarray(Wq, dtype=np.float64)
    cdef double[:, :, ::1] Wkm = np.ascontiguousarray(Wk, dtype=np.float64)
    cdef double[:, :, ::1] Wvm = np.ascontiguousarray(Wv, dtype=np.float64)
    cdef double[:, ::1] Wom = np.ascontiguousarray(Wo, dtype=np.float64)
    cdef double[::1] bm = np.ascontiguousarray(b, dtype=np.float64)

    cdef Py_ssize_t n = Hm.shape[0]
    cdef Py_ssize_t d = Hm.shape[1]
    cdef Py_ssize_t heads = Wqm.shape[0]
    cdef Py_ssize_t dv = Wvm.shape[2]
    cdef Py_ssize_t C = Wom.shape[1]
    cdef double scale = 1.0 / sqrt(<double> d)

    attn_np = np.empty((heads, n, n), dtype=np.float64)
    logits_np = np.empty(C, dtype=np.float64)
    cdef double[:, :, ::1] attn = attn_np
    cdef double[::1] logits = logits_np

    Q_np = np.empty((n, d), dtype=np.float64)
    K_np = np.empty((n, d), dtype=np.float64)
    V_np = np.empty((n, dv), dtype=np.float64)
    S_np = np.empty((n, n), dtype=np.float64)
    Z_np = np.zeros((n, dv), dtype=np.float64)
    pooled_np = np.zeros(dv, dtype=np.float64)
    cdef double[:, ::1] Q = Q_np, K = K_np, V = V_np, S = S_np, Z = Z_np
    cdef double[::1] pooled = pooled_np

    cdef Py_ssize_t h, i, j, p
    cdef double acc
    with nogil:
        for h in range(heads):
            _matmul(Q, Hm, Wqm[h], n, d, d)
            _matmul(K, Hm, Wkm[h], n, d, d)
            _matmul(V, Hm, Wvm[h], n, d, dv)
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for p in range(d):
                        acc += Q[i, p] * K[j, p]
                    S[i, j] = acc * scale
            _softmax_rows(S, n)
            for i in range(n):
                for j in range(n):
                    attn[h, i, j] = S[i, j]
            for i in range(n):
                for j in range(dv):
                    acc = 0.0
                    for p in range(n):
                        acc += S[i, p] * V[p, j]
                    Z[i, j] += acc
        for i in range(n):
            for j in range(dv):
                Z[i, j] /= heads
        if pool_mode == 0:
            for j in range(dv):
                acc = 0.0
                for i in range(n):
                    acc += Z[i, j]
                pooled[j] = acc / n
        else:
            for j in range(dv):
                pooled[j] = Z[n - 1, j]
        for j in range(C):
            acc = bm[j]
            for p in range(dv):
                acc += pooled[p] * Wom[p, j]
            logits[j] = acc
    return logits_np, attn_np


def attn_backward(H, Wq, Wk, Wv, Wo, b, dlogits, int pool_mode,
                  dWq=None, dWk=None, dWv=None, dWo=None, db=None):
    """Backward pass for attn_forward; returns dH (n, d).

    Parameter gradients are accumulated (+=) into the provided arrays.
    """
    cdef double[:, ::1] Hm = np.ascontiguousarray(H, dtype=np.float64)
    cdef double[:, :, ::1] Wqm = np.ascontiguousarray(Wq, dtype=np.float64)
    cdef double[:, :, ::1] Wkm = np.ascontiguousarray(Wk, dtype=np.float64)
    cdef double[:, :, ::1] Wvm = np.ascontiguousarray(Wv, dtype=np.float64)
    cdef double[:, ::1] Wom = np.ascontiguousarray(Wo, dtype=np.float64)
    cdef double[::1] dlog = np.ascontiguousarray(dlogits, dtype=np.float64)

    cdef Py_ssize_t n = Hm.shape[0]
    cdef Py_ssize_t d = Hm.shape[1]
    cdef Py_ssize_t heads = Wqm.shape[0]
    cdef Py_ssize_t dv = Wvm.shape[2]
    cdef Py_ssize_t C = Wom.shape[1]
    cdef double scale = 1.0 / sqrt(<double> d)

    cdef bint want_params = dWq is not None
    cdef double[:, :, ::1] dWqm = dWq if want_params else None
    cdef double[:, :, ::1] dWkm = dWk if want_params else None
    cdef double[:, :, ::1] dWvm = dWv if want_params else None
    cdef double[:, ::1] dWom = dWo if want_params else None
    cdef double[::1] dbm = db if want_params else None

    dH_np = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] dH = dH_np

    # per-head caches so the forward work is done once
    Qs_np = np.empty((heads, n, d), dtype=np.float64)
    Ks_np = np.empty((heads, n, d), dtype=np.float64)
    Vs_np = np.empty((heads, n, dv), dtype=np.float64)
    As_np = np.empty((heads, n, n), dtype=np.float64)
    Z_np = np.zeros((n, dv), dtype=np.float64)
    dZ_np = np.zeros((n, dv), dtype=np.float64)
    dA_np = np.empty((n, n), dtype=np.float64)
    dV_np = np.empty((n, dv), dtype=np.float64)
    dQ_np = np.empty((n, d), dtype=np.float64)
    dK_np = np.empty((n, d), dtype=np.float64)
    pooled_np = np.zeros(dv, dtype=np.float64)
    dpooled_np = np.zeros(dv, dtype=np.float64)
    cdef double[:, :, ::1] Qs = Qs_np, Ks = Ks_np, Vs = Vs_np, As = As_np
    cdef double[:, ::1] Z = Z_np
    cdef double[:, ::1] dZ = dZ_np, dA = dA_np, dV = dV_np, dQ = dQ_np, dK = dK_np
    cdef double[::1] pooled = pooled_np, dpooled = dpooled_np

    cdef Py_ssize_t h, i, j, p
    cdef double acc, dot

    with nogil:
        for h in range(heads):
            _matmul(Qs[h], Hm, Wqm[h], n, d, d)
            _matmul(Ks[h], Hm, Wkm[h], n, d, d)
            _matmul(Vs[h], Hm, Wvm[h], n, d, dv)
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for p in range(d):
                        acc += Qs[h, i, p] * Ks[h, j, p]
                    As[h, i, j] = acc * scale
            _softmax_rows(As[h], n)
            for i in range(n):
                for j in range(dv):
                    acc = 0.0
                    for p in range(n):
                        acc += As[h, i, p] * Vs[h, p, j]
                    Z[i, j] += acc
        for i in range(n):
            for j in range(dv):
                Z[i, j] /= heads
        if pool_mode == 0:
            for j in range(dv):
                acc = 0.0
                for i in range(n):
                    acc += Z[i, j]
                pooled[j] = acc / n
        else:
            for j in range(dv):
                pooled[j] = Z[n - 1, j]

        if want_params:
            for p in range(dv):
                for j in range(C):
                    dWom[p, j] += pooled[p] * dlog[j]
            for j in range(C):
                dbm[j] += dlog[j]

        for p in range(dv):
            acc = 0.0
            for j in range(C):
                acc += Wom[p, j] * dlog[j]
            dpooled[p] = acc

        if pool_mode == 0:
            for i in range(n):
                for j in range(dv):
                    dZ[i, j] = dpooled[j] / (n * heads)
        else:
            for j in range(dv):
                dZ[n - 1, j] = dpooled[j] / heads

        for h in range(heads):
            # dA = dZ @ V.T ; dV = A.T @ dZ
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for p in range(dv):
                        acc += dZ[i, p] * Vs[h, j, p]
                    dA[i, j] = acc
            for i in range(n):
                for j in range(dv):
                    acc = 0.0
                    for p in range(n):
                        acc += As[h, p, i] * dZ[p, j]
                    dV[i, j] = acc
            # softmax backward into dA (in place), then dQ / dK
            for i in range(n):
                dot = 0.0
                for j in range(n):
                    dot += dA[i, j] * As[h, i, j]
                for j in range(n):
                    dA[i, j] = As[h, i, j] * (dA[i, j] - dot)
            for i in range(n):
                for j in range(d):
                    acc = 0.0
                    for p in range(n):
                        acc += dA[i, p] * Ks[h, p, j]
                    dQ[i, j] = acc * scale
            for i in range(n):
                for j in range(d):
                    acc = 0.0
                    for p in range(n):
                        acc += dA[p, i] * Qs[h, p, j]
                    dK[i, j] = acc * scale
            # dH += dQ Wq^T + dK Wk^T + dV Wv^T
            for i in range(n):
                for j in range(d):
                    acc = 0.0
                    for p in range(d):
                        acc += dQ[i, p] * Wqm[h, j, p]
                        acc += dK[i, p] * Wkm[h, j, p]
                    for p in range(dv):
                        acc += dV[i, p] * Wvm[h, j, p]
                    dH[i, j] += acc
            if want_params:
                for i in range(d):
                    for j in range(d):
                        acc = 0.0
                        dot = 0.0
                        for p in range(n):
                            acc += Hm[p, i] * dQ[p, j]
                            dot += Hm[p, i] * dK[p, j]
                        dWqm[h, i, j] += acc
                        dWkm[h, i, j] += dot
                for i in range(d):
                    for j in range(dv):
                        acc = 0.0
                        for p in range(n):
                            acc += Hm[p, i] * dV[p, j]
                        dWvm[h, i, j] += acc
    return dH_np
