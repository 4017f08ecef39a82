"""Numba-compiled hot kernels.

Same call signatures as ``_kernels_numpy``; selection happens in
``fedsim.backend``.  All kernels take C-contiguous float64 arrays.
fastmath stays off so results are bit-reproducible run to run.
"""

import math

import numpy as np
from numba import njit

from . import _kernels_numpy as _vec

_JIT = dict(cache=True, nogil=True, fastmath=False)

# Asymptotic series coefficients (Bernoulli-number based).  All three
# special functions shift their argument up to >= 10 by recurrence, where
# the truncated series is accurate to well below 1e-13 absolute.
_SHIFT = 10.0

_LGAMMA_C = (
    8.333333333333333e-02, -2.777777777777778e-03, 7.936507936507937e-04,
    -5.952380952380953e-04, 8.417508417508418e-04, -1.9175269175269175e-03,
    6.410256410256410e-03,
)
_DIGAMMA_C = (
    8.333333333333333e-02, -8.333333333333333e-03, 3.968253968253968e-03,
    -4.166666666666667e-03, 7.575757575757576e-03, -2.1092796092796094e-02,
    8.333333333333333e-02,
)
_TRIGAMMA_C = (
    1.6666666666666666e-01, -3.3333333333333333e-02, 2.3809523809523808e-02,
    -3.3333333333333333e-02, 7.5757575757575760e-02, -2.5311355311355310e-01,
)

_HALF_LOG_TWO_PI = 0.9189385332046727


@njit(**_JIT)
def _lgamma_scalar(x):
    z = x
    prod = 1.0
    while z < _SHIFT:
        prod *= z
        z += 1.0
    w = 1.0 / (z * z)
    series = _LGAMMA_C[6]
    series = series * w + _LGAMMA_C[5]
    series = series * w + _LGAMMA_C[4]
    series = series * w + _LGAMMA_C[3]
    series = series * w + _LGAMMA_C[2]
    series = series * w + _LGAMMA_C[1]
    series = series * w + _LGAMMA_C[0]
    res = (z - 0.5) * math.log(z) - z + _HALF_LOG_TWO_PI + series / z
    return res - math.log(prod)


@njit(**_JIT)
def _digamma_scalar(x):
    z = x
    acc = 0.0
    while z < _SHIFT:
        acc -= 1.0 / z
        z += 1.0
    w = 1.0 / (z * z)
    series = _DIGAMMA_C[6]
    series = series * w + _DIGAMMA_C[5]
    series = series * w + _DIGAMMA_C[4]
    series = series * w + _DIGAMMA_C[3]
    series = series * w + _DIGAMMA_C[2]
    series = series * w + _DIGAMMA_C[1]
    series = series * w + _DIGAMMA_C[0]
    return acc + math.log(z) - 0.5 / z - series * w


@njit(**_JIT)
def _trigamma_scalar(x):
    z = x
    acc = 0.0
    while z < _SHIFT:
        acc += 1.0 / (z * z)
        z += 1.0
    w = 1.0 / (z * z)
    series = _TRIGAMMA_C[5]
    series = series * w + _TRIGAMMA_C[4]
    series = series * w + _TRIGAMMA_C[3]
    series = series * w + _TRIGAMMA_C[2]
    series = series * w + _TRIGAMMA_C[1]
    series = series * w + _TRIGAMMA_C[0]
    return acc + 1.0 / z + 0.5 * w + series * w / z


@njit(**_JIT)
def lgamma_vec(x):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = _lgamma_scalar(x[i])
    return out


@njit(**_JIT)
def digamma_vec(x):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = _digamma_scalar(x[i])
    return out


@njit(**_JIT)
def trigamma_vec(x):
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = _trigamma_scalar(x[i])
    return out


@njit(**_JIT)
def softmax_fwd(x):
    rows, cols = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            e = math.exp(x[r, c] - m)
            y[r, c] = e
            s += e
        inv = 1.0 / s
        for c in range(cols):
            y[r, c] *= inv
    return y


@njit(**_JIT)
def softmax_bwd(y, dy):
    rows, cols = y.shape
    dx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += dy[r, c] * y[r, c]
        for c in range(cols):
            dx[r, c] = y[r, c] * (dy[r, c] - dot)
    return dx


@njit(**_JIT)
def layernorm_fwd(x, gamma, beta, eps):
    rows, cols = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=np.float64)
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            var += d * d
        var /= cols
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for c in range(cols):
            h = (x[r, c] - mu) * rs
            xhat[r, c] = h
            y[r, c] = h * gamma[c] + beta[c]
    return y, xhat, rstd


@njit(**_JIT)
def layernorm_bwd(dy, xhat, rstd, gamma):
    rows, cols = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(cols, dtype=np.float64)
    dbeta = np.zeros(cols, dtype=np.float64)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            g = dy[r, c] * gamma[c]
            m1 += g
            m2 += g * xhat[r, c]
            dgamma[c] += dy[r, c] * xhat[r, c]
            dbeta[c] += dy[r, c]
        m1 /= cols
        m2 /= cols
        rs = rstd[r]
        for c in range(cols):
            g = dy[r, c] * gamma[c]
            dx[r, c] = rs * (g - m1 - xhat[r, c] * m2)
    return dx, dgamma, dbeta


_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


# the forward is vectorized-tanh bound, where numpy's SIMD beats a scalar
# loop on one core; the backward polynomial is where the loop pays off
gelu_fwd = _vec.gelu_fwd


@njit(**_JIT)
def gelu_bwd(x, t, dy):
    dx = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        ti = t[i]
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * v * v)
        dx[i] = dy[i] * (0.5 * (1.0 + ti) + 0.5 * v * (1.0 - ti * ti) * du)
    return dx


# scores are a stacked matmul, so BLAS wins the forward on one core
attn_probs_fwd = _vec.attn_probs_fwd


@njit(**_JIT)
def attn_probs_bwd(probs, q, k, scale, dp):
    r, t, c = probs.shape
    d = q.shape[2]
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    for b in range(r):
        for i in range(t):
            dot = 0.0
            for j in range(c):
                dot += dp[b, i, j] * probs[b, i, j]
            for j in range(c):
                ds = probs[b, i, j] * (dp[b, i, j] - dot) * scale
                for e in range(d):
                    dq[b, i, e] += ds * k[b, j, e]
                    dk[b, j, e] += ds * q[b, i, e]
    return dq, dk


def warmup():
    """Trigger compilation (or disk-cache load) of every kernel."""
    v = np.array([0.5, 1.0, 7.3, 120.0])
    lgamma_vec(v)
    digamma_vec(v)
    trigamma_vec(v)
    m = np.arange(6.0).reshape(2, 3)
    y = softmax_fwd(m)
    softmax_bwd(y, m)
    g = np.ones(3)
    b = np.zeros(3)
    yl, xh, rs = layernorm_fwd(m, g, b, 1e-5)
    layernorm_bwd(yl, xh, rs, g)
    yf, t = gelu_fwd(v)
    gelu_bwd(v, t, yf)
    q = np.arange(12.0).reshape(1, 3, 4)
    k = np.arange(16.0).reshape(1, 4, 4)
    attn_probs_bwd(attn_probs_fwd(q, k, 0.5), q, k, 0.5, np.ones((1, 3, 4)))
