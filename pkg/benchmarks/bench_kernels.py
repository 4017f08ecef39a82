"""Times the compiled kernels against the pure-numpy fallback.

Shapes follow the desk-scale training step: batches of 17-token
sequences with 8 prompt columns, 2 heads of width 16 on a 32-dim
embedding.  Run from the repository root:

    python3 benchmarks/bench_kernels.py
"""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedsim import _kernels_numpy as knp  # noqa: E402

try:
    from fedsim import _kernels_numba as knb

    knb.warmup()
except ImportError:
    knb = None

B, T, TK, HEADS, DH, D = 128, 17, 25, 2, 16, 32
RNG = np.random.default_rng(0)


def _time(fn, *args, repeats=30):
    fn(*args)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def cases():
    x = RNG.normal(size=(B * T, D))
    gamma, beta = np.ones(D), np.zeros(D)
    _, xhat, rstd = knp.layernorm_fwd(x, gamma, beta, 1e-5)
    dy = RNG.normal(size=x.shape)
    yield "layernorm_fwd", (x, gamma, beta, 1e-5)
    yield "layernorm_bwd", (dy, xhat, rstd, gamma)

    # the tape flattens before calling the gelu kernels
    z = RNG.normal(size=B * T * 4 * D)
    _, t = knp.gelu_fwd(z)
    yield "gelu_fwd", (z,)
    yield "gelu_bwd", (z, t, np.ones_like(z))

    q = RNG.normal(size=(B * HEADS, T, DH))
    k = RNG.normal(size=(B * HEADS, TK, DH))
    probs = knp.attn_probs_fwd(q, k, DH ** -0.5)
    dp = RNG.normal(size=probs.shape)
    yield "attn_probs_fwd", (q, k, DH ** -0.5)
    yield "attn_probs_bwd", (probs, q, k, DH ** -0.5, dp)

    logits = RNG.normal(size=(B, TK))
    yield "softmax_fwd", (logits,)

    v = RNG.uniform(0.1, 50.0, size=4096)
    yield "lgamma_vec", (v,)
    yield "digamma_vec", (v,)
    yield "trigamma_vec", (v,)


def main():
    if knb is None:
        print("numba unavailable; timing the numpy fallback only")
    print(f"{'kernel':<16} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}")
    for name, args in cases():
        t_np = _time(getattr(knp, name), *args)
        if knb is None:
            print(f"{name:<16} {t_np:9.3f} {'-':>9} {'-':>8}")
            continue
        t_nb = _time(getattr(knb, name), *args)
        print(f"{name:<16} {t_np:9.3f} {t_nb:9.3f} {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
