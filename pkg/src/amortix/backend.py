"""Kernel backend selection.

The hot inner loops (Adam updates, coupled relaxed sampling, the per-subset
model stack) have a numba-jitted implementation and a pure-numpy fallback.
`AMORTIX_BACKEND` picks between them:

    AMORTIX_BACKEND=numpy   force the numpy path
    AMORTIX_BACKEND=numba   require numba (raise if unavailable)
    AMORTIX_BACKEND=auto    numba when importable, else numpy (default)

`benchmarks/bench_kernels.py` compares the two paths head to head.
"""

from __future__ import annotations

import os

from . import kernels_np

_kernels = None
_name = None


def _resolve():
    global _kernels, _name
    if _kernels is not None:
        return
    choice = os.environ.get("AMORTIX_BACKEND", "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"AMORTIX_BACKEND must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        _kernels, _name = kernels_np, "numpy"
        return
    try:
        from . import kernels_nb
        _kernels, _name = kernels_nb, "numba"
    except ImportError:
        if choice == "numba":
            raise
        _kernels, _name = kernels_np, "numpy"


def kernels():
    _resolve()
    return _kernels


def backend_name() -> str:
    _resolve()
    return _name
