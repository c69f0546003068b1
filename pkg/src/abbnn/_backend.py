"""Kernel backend selection.

Set ``ABBNN_NO_NUMBA=1`` to force the pure-numpy kernels even when numba is
installed. The choice is made once at import time.
"""
from __future__ import annotations

import os

_DISABLED = os.environ.get("ABBNN_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is optional
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, else identity.

    Compilation is lazy, so decorating costs nothing when the numpy path is
    selected.
    """
    if not NUMBA_AVAILABLE:
        return func
    return _numba.njit(cache=True, nogil=True)(func)
