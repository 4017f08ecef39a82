"""Kernel backend selection.

The environment variable ``FEDSIM_BACKEND`` picks the hot-kernel
implementation:

* ``auto`` (default): numba if importable, else pure numpy
* ``numba``: require numba, error if missing
* ``numpy``: force the pure-numpy fallback

``benchmarks/bench_kernels.py`` compares the two.
"""

import os


class BackendError(RuntimeError):
    pass


def _select():
    choice = os.environ.get("FEDSIM_BACKEND", "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise BackendError(
            f"FEDSIM_BACKEND must be auto, numba or numpy (got {choice!r})"
        )
    if choice == "numpy":
        from fedsim import _kernels_numpy as impl
        return impl, "numpy"
    try:
        from fedsim import _kernels_numba as impl
        return impl, "numba"
    except ImportError:
        if choice == "numba":
            raise BackendError("FEDSIM_BACKEND=numba but numba is not importable")
        from fedsim import _kernels_numpy as impl
        return impl, "numpy"


kernels, BACKEND_NAME = _select()


def backend_name() -> str:
    return BACKEND_NAME
