# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contract as ``_fallback``; arrays are row-major
float64 and matrix products go through BLAS dgemm."""
import numpy as np

from libc.math cimport exp, log, sqrt
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "cython"

cdef char _N = 78  # 'N'
cdef char _T = 84  # 'T'


cdef inline void mm(bint ta, bint tb, int M, int N, int K, double alpha,
                    double* A, int lda, double* B, int ldb, double beta,
                    double* C, int ldc) noexcept nogil:
    # Row-major C[M,N] = alpha * op(A)[M,K] @ op(B)[K,N] + beta * C,
    # evaluated as the column-major product C^T = op(B)^T op(A)^T.
    cdef char ca = _T if ta else _N
    cdef char cb = _T if tb else _N
    dgemm(&cb, &ca, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline void softmax_rows(double* a, int n) noexcept nogil:
    cdef int i, j
    cdef double mx, tot
    for i in range(n):
        mx = a[i * n]
        for j in range(1, n):
            if a[i * n + j] > mx:
                mx = a[i * n + j]
        tot = 0.0
        for j in range(n):
            a[i * n + j] = exp(a[i * n + j] - mx)
            tot += a[i * n + j]
        for j in range(n):
            a[i * n + j] /= tot


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def attn_forward(X, WQ, WK, WV, WFC, mask, gain, bias, int heads, double eps):
    X, WQ, WK, WV, WFC = _c(X), _c(WQ), _c(WK), _c(WV), _c(WFC)
    gain, bias = _c(gain), _c(bias)
    cdef int n = X.shape[0]
    cdef int m = X.shape[1]
    cdef int hm = heads * m
    cdef int h, i, t, off
    cdef double scale = 1.0 / sqrt(m)
    cdef double mu, var, iv
    cdef bint has_mask = mask is not None
    mask_arr = _c(mask) if has_mask else np.ones((1, 1))

    Q = np.empty((n, hm))
    K = np.empty((n, hm))
    Vt = np.empty((n, hm))
    A = np.empty((heads, n, n))
    O = np.empty((n, hm))
    R = np.empty((n, m))
    xhat = np.empty((n, m))
    inv = np.empty(n)
    Y = np.empty((n, m))

    cdef double[:, ::1] x = X, wq = WQ, wk = WK, wv = WV, wfc = WFC
    cdef double[:, ::1] q = Q, k = K, vt = Vt, o = O, r = R, xh = xhat, y = Y
    cdef double[:, ::1] mk = mask_arr
    cdef double[:, :, ::1] a = A
    cdef double[::1] g = gain, b = bias, iv_ = inv

    with nogil:
        mm(0, 0, n, hm, m, 1.0, &x[0, 0], m, &wq[0, 0], hm, 0.0, &q[0, 0], hm)
        mm(0, 0, n, hm, m, 1.0, &x[0, 0], m, &wk[0, 0], hm, 0.0, &k[0, 0], hm)
        mm(0, 0, n, hm, m, 1.0, &x[0, 0], m, &wv[0, 0], hm, 0.0, &vt[0, 0], hm)
        for h in range(heads):
            off = h * m
            mm(0, 1, n, n, m, scale, &q[0, off], hm, &k[0, off], hm, 0.0, &a[h, 0, 0], n)
            softmax_rows(&a[h, 0, 0], n)
            mm(0, 0, n, m, n, 1.0, &a[h, 0, 0], n, &vt[0, off], hm, 0.0, &o[0, off], hm)
        mm(0, 0, n, m, hm, 1.0, &o[0, 0], hm, &wfc[0, 0], m, 0.0, &r[0, 0], m)
        for i in range(n):
            mu = 0.0
            for t in range(m):
                if has_mask:
                    r[i, t] = r[i, t] * mk[i, t]
                r[i, t] = r[i, t] + x[i, t]
                mu += r[i, t]
            mu /= m
            var = 0.0
            for t in range(m):
                xh[i, t] = r[i, t] - mu
                var += xh[i, t] * xh[i, t]
            iv = 1.0 / sqrt(var / m + eps)
            iv_[i] = iv
            for t in range(m):
                xh[i, t] = xh[i, t] * iv
                y[i, t] = xh[i, t] * g[t] + b[t]

    cache = (X, WQ, WK, WV, WFC, mask_arr if has_mask else None, gain,
             Q, K, Vt, A, O, xhat, inv, heads)
    return Y, cache


def attn_backward(cache, dY):
    X, WQ, WK, WV, WFC, mask, gain, Q, K, Vt, A, O, xhat, inv, heads_ = cache
    dY = _c(dY)
    cdef int heads = heads_
    cdef int n = X.shape[0]
    cdef int m = X.shape[1]
    cdef int hm = heads * m
    cdef int h, i, j, t, off
    cdef double scale = 1.0 / sqrt(m)
    cdef double s1, s2
    cdef bint has_mask = mask is not None
    mask_arr = mask if has_mask else np.ones((1, 1))

    d_gain = np.zeros(m)
    d_bias = np.zeros(m)
    dR = np.empty((n, m))
    dF = np.empty((n, m))
    dWFC = np.empty((hm, m))
    dO = np.empty((n, hm))
    dA = np.empty((n, n))
    dQ = np.empty((n, hm))
    dK = np.empty((n, hm))
    dVt = np.empty((n, hm))
    dX = np.empty((n, m))
    dWQ = np.empty((m, hm))
    dWK = np.empty((m, hm))
    dWV = np.empty((m, hm))

    cdef double[:, ::1] x = X, wq = WQ, wk = WK, wv = WV, wfc = WFC
    cdef double[:, ::1] q = Q, k = K, vt = Vt, o = O, xh = xhat, dy = dY
    cdef double[:, :, ::1] a = A
    cdef double[:, ::1] mk = mask_arr
    cdef double[::1] g = gain, iv = inv, dg = d_gain, db = d_bias
    cdef double[:, ::1] dr = dR, df = dF, dwfc = dWFC, do = dO, da = dA
    cdef double[:, ::1] dq = dQ, dk = dK, dvt = dVt, dx = dX
    cdef double[:, ::1] dwq = dWQ, dwk = dWK, dwv = dWV

    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for t in range(m):
                dg[t] += dy[i, t] * xh[i, t]
                db[t] += dy[i, t]
                dr[i, t] = dy[i, t] * g[t]
                s1 += dr[i, t]
                s2 += dr[i, t] * xh[i, t]
            s1 /= m
            s2 /= m
            for t in range(m):
                dr[i, t] = iv[i] * (dr[i, t] - s1 - xh[i, t] * s2)
                df[i, t] = dr[i, t] * mk[i, t] if has_mask else dr[i, t]
                dx[i, t] = dr[i, t]
        mm(1, 0, hm, m, n, 1.0, &o[0, 0], hm, &df[0, 0], m, 0.0, &dwfc[0, 0], m)
        mm(0, 1, n, hm, m, 1.0, &df[0, 0], m, &wfc[0, 0], m, 0.0, &do[0, 0], hm)
        for h in range(heads):
            off = h * m
            mm(0, 1, n, n, m, 1.0, &do[0, off], hm, &vt[0, off], hm, 0.0, &da[0, 0], n)
            mm(1, 0, n, m, n, 1.0, &a[h, 0, 0], n, &do[0, off], hm, 0.0, &dvt[0, off], hm)
            for i in range(n):
                s1 = 0.0
                for j in range(n):
                    s1 += da[i, j] * a[h, i, j]
                for j in range(n):
                    da[i, j] = a[h, i, j] * (da[i, j] - s1)
            mm(0, 0, n, m, n, scale, &da[0, 0], n, &k[0, off], hm, 0.0, &dq[0, off], hm)
            mm(1, 0, n, m, n, scale, &da[0, 0], n, &q[0, off], hm, 0.0, &dk[0, off], hm)
        mm(0, 1, n, m, hm, 1.0, &dq[0, 0], hm, &wq[0, 0], hm, 1.0, &dx[0, 0], m)
        mm(0, 1, n, m, hm, 1.0, &dk[0, 0], hm, &wk[0, 0], hm, 1.0, &dx[0, 0], m)
        mm(0, 1, n, m, hm, 1.0, &dvt[0, 0], hm, &wv[0, 0], hm, 1.0, &dx[0, 0], m)
        mm(1, 0, m, hm, n, 1.0, &x[0, 0], m, &dq[0, 0], hm, 0.0, &dwq[0, 0], hm)
        mm(1, 0, m, hm, n, 1.0, &x[0, 0], m, &dk[0, 0], hm, 0.0, &dwk[0, 0], hm)
        mm(1, 0, m, hm, n, 1.0, &x[0, 0], m, &dvt[0, 0], hm, 0.0, &dwv[0, 0], hm)

    return {
        "X": dX,
        "W_Q": dWQ,
        "W_K": dWK,
        "W_V": dWV,
        "W_FC": dWFC,
        "ln_gain": d_gain,
        "ln_bias": d_bias,
    }


cdef void _logprobs(double[:, ::1] z, double[:, ::1] p, double tau,
                    double[:, ::1] lp) noexcept nogil:
    cdef int n = z.shape[0]
    cdef int c = p.shape[0]
    cdef int m = z.shape[1]
    cdef int i, j, t
    cdef double d, diff, mx, tot
    for i in range(n):
        for j in range(c):
            d = 0.0
            for t in range(m):
                diff = z[i, t] - p[j, t]
                d += diff * diff
            lp[i, j] = -tau * d
        mx = lp[i, 0]
        for j in range(1, c):
            if lp[i, j] > mx:
                mx = lp[i, j]
        tot = 0.0
        for j in range(c):
            lp[i, j] -= mx
            tot += exp(lp[i, j])
        tot = log(tot)
        for j in range(c):
            lp[i, j] -= tot


def proto_logprobs(Z, P, double tau):
    Z, P = _c(Z), _c(P)
    out = np.empty((Z.shape[0], P.shape[0]))
    cdef double[:, ::1] z = Z, p = P, lp = out
    with nogil:
        _logprobs(z, p, tau, lp)
    return out


def proto_head(Z, P, double tau, targets, weights):
    Z, P = _c(Z), _c(P)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    weights = _c(weights)
    cdef int n = Z.shape[0]
    cdef int c = P.shape[0]
    cdef int m = Z.shape[1]
    cdef int i, j, t
    cdef long long y
    cdef double ent, pr, gs, acc, loss = 0.0
    LP = np.empty((n, c))
    G = np.empty((n, c))
    dZ = np.empty((n, m))
    dP = np.empty((c, m))
    cdef double[:, ::1] z = Z, p = P, lp = LP, gg = G, dz = dZ, dp = dP
    cdef long long[::1] tg = targets
    cdef double[::1] w = weights

    with nogil:
        _logprobs(z, p, tau, lp)
        for i in range(n):
            y = tg[i]
            if y >= 0:
                loss += -w[i] * lp[i, y]
                for j in range(c):
                    gg[i, j] = w[i] * exp(lp[i, j])
                gg[i, y] -= w[i]
            else:
                ent = 0.0
                for j in range(c):
                    ent -= exp(lp[i, j]) * lp[i, j]
                loss += w[i] * ent
                for j in range(c):
                    pr = exp(lp[i, j])
                    gg[i, j] = -w[i] * pr * (lp[i, j] + ent)
        for i in range(n):
            gs = 0.0
            for j in range(c):
                gs += gg[i, j]
            for t in range(m):
                acc = 0.0
                for j in range(c):
                    acc += gg[i, j] * p[j, t]
                dz[i, t] = -2.0 * tau * (z[i, t] * gs - acc)
        for j in range(c):
            gs = 0.0
            for i in range(n):
                gs += gg[i, j]
            for t in range(m):
                acc = 0.0
                for i in range(n):
                    acc += gg[i, j] * z[i, t]
                dp[j, t] = 2.0 * tau * (acc - p[j, t] * gs)
    return loss, dZ, dP


cdef inline unsigned long long _rotl(unsigned long long x, int k) noexcept nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_uniform(state, Py_ssize_t count):
    """Advance a xoshiro256** state (uint64[4], updated in place) ``count``
    times; return the draws as doubles in [0, 1)."""
    out = np.empty(count)
    cdef unsigned long long[::1] s = state
    cdef double[::1] o = out
    cdef unsigned long long r, t
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            r = _rotl(s[1] * 5, 7) * 9
            t = s[1] << 17
            s[2] ^= s[0]
            s[3] ^= s[1]
            s[1] ^= s[2]
            s[0] ^= s[3]
            s[2] ^= t
            s[3] = _rotl(s[3], 45)
            o[i] = (r >> 11) * (1.0 / 9007199254740992.0)
    return out
