"""Pure-numpy fallback for the hot kernels.

Identical signatures and numerics (same recurrence shifts, same series) as
``_kernels_numba``; used when numba is unavailable or when
``FEDSIM_BACKEND=numpy`` is set.
"""

import numpy as np

_SHIFT = 10.0

_LGAMMA_C = np.array([
    8.333333333333333e-02, -2.777777777777778e-03, 7.936507936507937e-04,
    -5.952380952380953e-04, 8.417508417508418e-04, -1.9175269175269175e-03,
    6.410256410256410e-03,
])
_DIGAMMA_C = np.array([
    8.333333333333333e-02, -8.333333333333333e-03, 3.968253968253968e-03,
    -4.166666666666667e-03, 7.575757575757576e-03, -2.1092796092796094e-02,
    8.333333333333333e-02,
])
_TRIGAMMA_C = np.array([
    1.6666666666666666e-01, -3.3333333333333333e-02, 2.3809523809523808e-02,
    -3.3333333333333333e-02, 7.5757575757575760e-02, -2.5311355311355310e-01,
])

_HALF_LOG_TWO_PI = 0.9189385332046727


def _horner(coeffs, w):
    series = np.full_like(w, coeffs[-1])
    for c in coeffs[-2::-1]:
        series = series * w + c
    return series


def lgamma_vec(x):
    z = x.copy()
    prod = np.ones_like(z)
    mask = z < _SHIFT
    while mask.any():
        prod[mask] *= z[mask]
        z[mask] += 1.0
        mask = z < _SHIFT
    w = 1.0 / (z * z)
    series = _horner(_LGAMMA_C, w)
    res = (z - 0.5) * np.log(z) - z + _HALF_LOG_TWO_PI + series / z
    return res - np.log(prod)


def digamma_vec(x):
    z = x.copy()
    acc = np.zeros_like(z)
    mask = z < _SHIFT
    while mask.any():
        acc[mask] -= 1.0 / z[mask]
        z[mask] += 1.0
        mask = z < _SHIFT
    w = 1.0 / (z * z)
    series = _horner(_DIGAMMA_C, w)
    return acc + np.log(z) - 0.5 / z - series * w


def trigamma_vec(x):
    z = x.copy()
    acc = np.zeros_like(z)
    mask = z < _SHIFT
    while mask.any():
        acc[mask] += 1.0 / (z[mask] * z[mask])
        z[mask] += 1.0
        mask = z < _SHIFT
    w = 1.0 / (z * z)
    series = _horner(_TRIGAMMA_C, w)
    return acc + 1.0 / z + 0.5 * w + series * w / z


def softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, dy):
    dot = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd[:, None]
    return xhat * gamma + beta, xhat, rstd


def layernorm_bwd(dy, xhat, rstd, gamma):
    g = dy * gamma
    m1 = g.mean(axis=1, keepdims=True)
    m2 = (g * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (g - m1 - xhat * m2)
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    return dx, dgamma, dbeta


_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def gelu_fwd(x):
    t = np.tanh(_GELU_C0 * (x + _GELU_C1 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(x, t, dy):
    du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def attn_probs_fwd(q, k, scale):
    """Fused scores + stabilized softmax for stacked attention.

    q [R, T, d], k [R, C, d] -> probabilities [R, T, C], rows sum to 1.
    """
    s = np.matmul(q, k.transpose(0, 2, 1))
    s *= scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attn_probs_bwd(probs, q, k, scale, dp):
    dot = (dp * probs).sum(axis=-1, keepdims=True)
    ds = probs * (dp - dot)
    ds *= scale
    dq = np.matmul(ds, k)
    dk = np.matmul(ds.transpose(0, 2, 1), q)
    return dq, dk


def warmup():
    """No-op; present for API parity with the numba backend."""
