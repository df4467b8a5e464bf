"""Pure numpy implementations of the hot numeric kernels.

Mirrors the compiled extension in trigsense.kernels._core; either module
satisfies the same contract and is selected at import time by the package
__init__. Shapes: H is the (n, d) input-embedding matrix (token embedding
plus positional), per-head projections are stacked as (heads, d, d), the
output head is (d, C).
"""

from __future__ import annotations

import numpy as np

POOL_MEAN = 0
POOL_LAST = 1


def bigram_logprob_sum(tokens: np.ndarray, log_init: np.ndarray, log_trans: np.ndarray) -> float:
    """Log-probability of a token sequence under a first-order chain."""
    tokens = np.asarray(tokens, dtype=np.int64)
    total = float(log_init[tokens[0]])
    if tokens.shape[0] > 1:
        total += float(log_trans[tokens[:-1], tokens[1:]].sum())
    return total


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def attn_forward(
    H: np.ndarray,
    Wq: np.ndarray,
    Wk: np.ndarray,
    Wv: np.ndarray,
    Wo: np.ndarray,
    b: np.ndarray,
    pool_mode: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-layer multi-head attention with a pooled linear head.

    Returns (logits, attention) where attention has shape (heads, n, n).
    """
    n, d = H.shape
    heads = Wq.shape[0]
    scale = 1.0 / np.sqrt(d)
    attn = np.empty((heads, n, n), dtype=np.float64)
    Z = np.zeros((n, Wv.shape[2]), dtype=np.float64)
    for h in range(heads):
        Q = H @ Wq[h]
        K = H @ Wk[h]
        V = H @ Wv[h]
        A = _softmax_rows((Q @ K.T) * scale)
        attn[h] = A
        Z += A @ V
    Z /= heads
    pooled = Z.mean(axis=0) if pool_mode == POOL_MEAN else Z[n - 1]
    logits = pooled @ Wo + b
    return logits, attn


def attn_backward(
    H: np.ndarray,
    Wq: np.ndarray,
    Wk: np.ndarray,
    Wv: np.ndarray,
    Wo: np.ndarray,
    b: np.ndarray,
    dlogits: np.ndarray,
    pool_mode: int,
    dWq: np.ndarray | None = None,
    dWk: np.ndarray | None = None,
    dWv: np.ndarray | None = None,
    dWo: np.ndarray | None = None,
    db: np.ndarray | None = None,
) -> np.ndarray:
    """Backward pass for attn_forward.

    Returns dH (n, d). When parameter-gradient arrays are supplied the
    gradients are accumulated (+=) into them, so callers can reuse buffers
    across a batch.
    """
    n, d = H.shape
    heads = Wq.shape[0]
    scale = 1.0 / np.sqrt(d)

    # Recompute the forward intermediates (cheaper than caching at these sizes).
    Qs, Ks, Vs, As = [], [], [], []
    Z = np.zeros((n, Wv.shape[2]), dtype=np.float64)
    for h in range(heads):
        Q = H @ Wq[h]
        K = H @ Wk[h]
        V = H @ Wv[h]
        A = _softmax_rows((Q @ K.T) * scale)
        Qs.append(Q)
        Ks.append(K)
        Vs.append(V)
        As.append(A)
        Z += A @ V
    Z /= heads
    pooled = Z.mean(axis=0) if pool_mode == POOL_MEAN else Z[n - 1]

    if dWo is not None:
        dWo += np.outer(pooled, dlogits)
    if db is not None:
        db += dlogits

    dpooled = Wo @ dlogits
    dZ = np.zeros_like(Z)
    if pool_mode == POOL_MEAN:
        dZ[:] = dpooled / n
    else:
        dZ[n - 1] = dpooled
    dZ /= heads

    dH = np.zeros_like(H)
    for h in range(heads):
        A, Q, K, V = As[h], Qs[h], Ks[h], Vs[h]
        dA = dZ @ V.T
        dV = A.T @ dZ
        # softmax backward, row-wise
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dQ = (dS @ K) * scale
        dK = (dS.T @ Q) * scale
        dH += dQ @ Wq[h].T + dK @ Wk[h].T + dV @ Wv[h].T
        if dWq is not None:
            dWq[h] += H.T @ dQ
        if dWk is not None:
            dWk[h] += H.T @ dK
        if dWv is not None:
            dWv[h] += H.T @ dV
    return dH
