"""Hot integer kernels: popcount, XNOR-popcount matrix products, shift-add products.

Each kernel has a numba implementation (``*_numba``) and a vectorized numpy
implementation (``*_numpy``); the public name is bound to one of them according
to :mod:`abbnn._backend`. Both are kept importable so tests and the benchmark can
compare them directly.

None of these kernels multiplies data values. Doubling is a left shift and the
popcount reduction uses the add/shift form rather than the usual multiply-by-
0x0101... trick.
"""
from __future__ import annotations

import numpy as np

from ._backend import BACKEND, NUMBA_AVAILABLE, USE_NUMBA, njit

__all__ = [
    "BACKEND",
    "popcount64",
    "xnor_popcount_matmul",
    "shift_add_matmul",
    "IMPLEMENTATIONS",
]

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)


# --------------------------------------------------------------------------- numpy


def _swar_popcount_numpy(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x -= (x >> np.uint64(1)) & _M1
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    x += x >> np.uint64(8)
    x += x >> np.uint64(16)
    x += x >> np.uint64(32)
    return (x & np.uint64(0x7F)).astype(np.int64)


if hasattr(np, "bitwise_count"):

    def popcount64_numpy(x: np.ndarray) -> np.ndarray:
        return np.bitwise_count(np.asarray(x, dtype=np.uint64)).astype(np.int64)

else:  # pragma: no cover - numpy < 2.0
    popcount64_numpy = _swar_popcount_numpy


def xnor_popcount_matmul_numpy(a, valid, w, n_valid):
    """``out[p, o] = 2 * popcount(~(a[p] ^ w[o]) & valid[p]) - n_valid[p]``."""
    P, nw = a.shape
    out = np.zeros((P, w.shape[0]), dtype=np.int64)
    for j in range(nw):
        agree = ~(a[:, j, None] ^ w[None, :, j]) & valid[:, j, None]
        out += popcount64_numpy(agree)
    return np.left_shift(out, 1) - np.asarray(n_valid, dtype=np.int64)[:, None]


def shift_add_matmul_numpy(x, w):
    """``out[p, o] = sum_n x[p, n] * w[o, n]`` built from shifted copies of x.

    One bit-plane of ``|w|`` per pass; the sign of w selects add or subtract.
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    mag = np.abs(w)
    neg = w < 0
    out = np.zeros((x.shape[0], w.shape[0]), dtype=np.int64)
    top = int(mag.max()).bit_length() if mag.size else 0
    zero = np.int64(0)
    for b in range(top):
        plane = ((mag >> b) & 1).astype(bool)
        if not plane.any():
            continue
        shifted = np.left_shift(x, b)[:, None, :]
        out += np.where((plane & ~neg)[None], shifted, zero).sum(axis=-1)
        out -= np.where((plane & neg)[None], shifted, zero).sum(axis=-1)
    return out


# --------------------------------------------------------------------------- numba


@njit
def _popcount_word(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    x = x + (x >> np.uint64(8))
    x = x + (x >> np.uint64(16))
    x = x + (x >> np.uint64(32))
    return np.int64(x & np.uint64(0x7F))


@njit
def _popcount64_flat(words):
    out = np.empty(words.size, dtype=np.int64)
    for i in range(words.size):
        out[i] = _popcount_word(words[i])
    return out


def popcount64_numba(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.uint64)
    return _popcount64_flat(x.ravel()).reshape(x.shape)


@njit
def _xnor_popcount_matmul_nb(a, valid, w, n_valid):
    P, nw = a.shape
    O = w.shape[0]
    out = np.empty((P, O), dtype=np.int64)
    for p in range(P):
        for o in range(O):
            s = np.int64(0)
            for j in range(nw):
                s += _popcount_word(~(a[p, j] ^ w[o, j]) & valid[p, j])
            out[p, o] = (s << 1) - n_valid[p]
    return out


def xnor_popcount_matmul_numba(a, valid, w, n_valid):
    return _xnor_popcount_matmul_nb(
        np.ascontiguousarray(a, dtype=np.uint64),
        np.ascontiguousarray(valid, dtype=np.uint64),
        np.ascontiguousarray(w, dtype=np.uint64),
        np.ascontiguousarray(n_valid, dtype=np.int64),
    )


@njit
def _shift_add_matmul_nb(x, w):
    P, N = x.shape
    O = w.shape[0]
    out = np.zeros((P, O), dtype=np.int64)
    for p in range(P):
        for o in range(O):
            acc = np.int64(0)
            for n in range(N):
                wv = w[o, n]
                neg = wv < 0
                m = -wv if neg else wv
                xv = x[p, n]
                b = 0
                while m != 0:
                    if m & 1:
                        if neg:
                            acc -= xv << b
                        else:
                            acc += xv << b
                    m >>= 1
                    b += 1
            out[p, o] = acc
    return out


def shift_add_matmul_numba(x, w):
    return _shift_add_matmul_nb(
        np.ascontiguousarray(x, dtype=np.int64), np.ascontiguousarray(w, dtype=np.int64)
    )


# --------------------------------------------------------------------------- dispatch

IMPLEMENTATIONS = {
    "numpy": {
        "popcount64": popcount64_numpy,
        "xnor_popcount_matmul": xnor_popcount_matmul_numpy,
        "shift_add_matmul": shift_add_matmul_numpy,
    },
}
if NUMBA_AVAILABLE:
    IMPLEMENTATIONS["numba"] = {
        "popcount64": popcount64_numba,
        "xnor_popcount_matmul": xnor_popcount_matmul_numba,
        "shift_add_matmul": shift_add_matmul_numba,
    }

_active = IMPLEMENTATIONS["numba" if USE_NUMBA else "numpy"]
popcount64 = _active["popcount64"]
xnor_popcount_matmul = _active["xnor_popcount_matmul"]
shift_add_matmul = _active["shift_add_matmul"]
