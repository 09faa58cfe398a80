"""Pure numpy implementation of the hot kernels.

Row convention throughout: a set of embeddings is an (n, m) array, one
element per row.
"""
import numpy as np

BACKEND = "numpy"


def attn_forward(X, WQ, WK, WV, WFC, mask, gain, bias, heads, eps):
    """Single-layer self-attention block with residual and layer norm.

    Returns the adapted set and an opaque cache for :func:`attn_backward`.
    ``mask`` is either None (identity) or an (n, m) array of inverted-dropout
    scale factors applied to the fully connected output.
    """
    n, m = X.shape
    scale = 1.0 / np.sqrt(m)
    Q = X @ WQ
    K = X @ WK
    Vt = X @ WV
    A = np.empty((heads, n, n))
    O = np.empty((n, heads * m))
    for h in range(heads):
        sl = slice(h * m, (h + 1) * m)
        S = (Q[:, sl] @ K[:, sl].T) * scale
        S -= S.max(axis=1, keepdims=True)
        E = np.exp(S)
        A[h] = E / E.sum(axis=1, keepdims=True)
        O[:, sl] = A[h] @ Vt[:, sl]
    F = O @ WFC
    if mask is not None:
        F = F * mask
    R = F + X
    xc = R - R.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    xhat = xc * inv[:, None]
    Y = xhat * gain + bias
    cache = (X, WQ, WK, WV, WFC, mask, gain, Q, K, Vt, A, O, xhat, inv, heads)
    return Y, cache


def attn_backward(cache, dY):
    X, WQ, WK, WV, WFC, mask, gain, Q, K, Vt, A, O, xhat, inv, heads = cache
    n, m = X.shape
    scale = 1.0 / np.sqrt(m)
    d_gain = (dY * xhat).sum(axis=0)
    d_bias = dY.sum(axis=0)
    dxh = dY * gain
    dR = inv[:, None] * (
        dxh
        - dxh.mean(axis=1, keepdims=True)
        - xhat * (dxh * xhat).mean(axis=1, keepdims=True)
    )
    dF = dR * mask if mask is not None else dR
    dWFC = O.T @ dF
    dO = dF @ WFC.T
    dQ = np.empty_like(Q)
    dK = np.empty_like(K)
    dVt = np.empty_like(Vt)
    for h in range(heads):
        sl = slice(h * m, (h + 1) * m)
        a = A[h]
        dA = dO[:, sl] @ Vt[:, sl].T
        dVt[:, sl] = a.T @ dO[:, sl]
        dS = a * (dA - (dA * a).sum(axis=1, keepdims=True))
        dQ[:, sl] = (dS @ K[:, sl]) * scale
        dK[:, sl] = (dS.T @ Q[:, sl]) * scale
    dX = dR + dQ @ WQ.T + dK @ WK.T + dVt @ WV.T
    return {
        "X": dX,
        "W_Q": X.T @ dQ,
        "W_K": X.T @ dK,
        "W_V": X.T @ dVt,
        "W_FC": dWFC,
        "ln_gain": d_gain,
        "ln_bias": d_bias,
    }


def proto_logprobs(Z, P, tau):
    """Log-softmax of ``-tau * ||z - p||^2`` over prototypes, one row per query."""
    diff = Z[:, None, :] - P[None, :, :]
    s = -tau * np.einsum("ijk,ijk->ij", diff, diff)
    s -= s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def proto_head(Z, P, tau, targets, weights):
    """Weighted sum of per-query cross-entropy or entropy terms, with gradients.

    Row i contributes ``weights[i] * CE(targets[i])`` when ``targets[i] >= 0``
    and ``weights[i] * H(probs_i)`` when ``targets[i] == -1``.
    Returns ``(loss, dZ, dP)``.
    """
    n = Z.shape[0]
    logp = proto_logprobs(Z, P, tau)
    p = np.exp(logp)
    rows = np.arange(n)
    is_ce = targets >= 0
    ent = -(p * logp).sum(axis=1)
    per_row = np.where(is_ce, -logp[rows, np.where(is_ce, targets, 0)], ent)
    loss = float((weights * per_row).sum())

    G = np.where(is_ce[:, None], p, -p * (logp + ent[:, None]))
    ce_rows = rows[is_ce]
    G[ce_rows, targets[is_ce]] -= 1.0
    G *= weights[:, None]
    dZ = -2.0 * tau * (Z * G.sum(axis=1)[:, None] - G @ P)
    dP = 2.0 * tau * (G.T @ Z - P * G.sum(axis=0)[:, None])
    return loss, dZ, dP


_M64 = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _M64


def xoshiro_uniform(state, count):
    """Advance a xoshiro256** state (uint64[4], updated in place) ``count``
    times; return the draws as doubles in [0, 1)."""
    s0, s1, s2, s3 = (int(v) for v in state)
    out = np.empty(count)
    for i in range(count):
        r = (_rotl((s1 * 5) & _M64, 7) * 9) & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        out[i] = (r >> 11) * (1.0 / 9007199254740992.0)
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
    return out
