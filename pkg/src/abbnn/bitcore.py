"""Bit-packed sign tensors and saturating fixed-point tensors.

Conventions
-----------
* sign(0) = +1. A value maps to bit 1 iff it is >= 0, so packing is total.
* Bits are packed along the last axis into little-endian uint64 words,
  LSB-first. Padding bits in the last word of a row are always 0.
* Fixed point is two's-complement int32 with ``frac_bits`` fractional bits
  (Q15.16 by default). Right shifts are arithmetic (round toward -inf);
  left shifts and additions saturate, and every clamped element is counted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .kernels import popcount64

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1
DEFAULT_FRAC_BITS = 16
WORD_BITS = 64


def n_words(length: int) -> int:
    return (length + WORD_BITS - 1) // WORD_BITS


# --------------------------------------------------------------------------- bits


@dataclass(frozen=True)
class BitTensor:
    """{-1, +1} tensor packed along its innermost axis.

    ``words`` has shape ``shape[:-1] + (n_words(shape[-1]),)``.
    """

    shape: tuple[int, ...]
    words: np.ndarray

    def __post_init__(self):
        expected = tuple(self.shape[:-1]) + (n_words(self.shape[-1]),)
        if self.words.shape != expected or self.words.dtype != np.uint64:
            raise ContractViolation(
                f"words must be uint64 with shape {expected}, got {self.words.dtype} {self.words.shape}"
            )

    @property
    def length(self) -> int:
        return self.shape[-1]

    @property
    def pad_bits(self) -> int:
        return n_words(self.length) * WORD_BITS - self.length

    def row(self, index) -> "BitTensor":
        return BitTensor((self.length,), self.words[index])

    def to_bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.length)

    def unpack(self) -> np.ndarray:
        """Return the logical values as int8 -1/+1."""
        bits = self.to_bits()
        return np.where(bits, np.int8(1), np.int8(-1))


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into uint64 words (LSB-first)."""
    bits = np.asarray(bits, dtype=bool)
    length = bits.shape[-1]
    nw = n_words(length)
    padded = np.zeros(bits.shape[:-1] + (nw * WORD_BITS,), dtype=bool)
    padded[..., :length] = bits
    as_bytes = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(as_bytes).view("<u8").astype(np.uint64, copy=False).reshape(
        bits.shape[:-1] + (nw,)
    )


def unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    as_bytes = words.view(np.uint8).reshape(words.shape[:-1] + (words.shape[-1] * 8,))
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :length].astype(bool)


def pack_signs(v) -> BitTensor:
    """Binarize ``v`` with sign(0)=+1 and pack along the last axis."""
    v = np.asarray(v)
    if v.ndim == 0:
        v = v.reshape(1)
    return BitTensor(tuple(v.shape), pack_bits(v >= 0))


def row_mask(length: int) -> np.ndarray:
    """Words with exactly the first ``length`` bits set."""
    return pack_bits(np.ones(length, dtype=bool))


def xnor_popcount_dot(a: BitTensor, b: BitTensor, n: int | None = None) -> int:
    """±1 dot product of two packed rows: ``2 * popcount(XNOR(a, b)) - n``."""
    if a.shape != b.shape or len(a.shape) != 1:
        raise ContractViolation(f"row shape mismatch: {a.shape} vs {b.shape}")
    if n is None:
        n = a.length
    if n != a.length:
        raise ContractViolation(f"logical length {n} does not match rows of length {a.length}")
    agree = ~(a.words ^ b.words) & row_mask(n)
    return int(np.left_shift(int(popcount64(agree).sum()), 1)) - n


# --------------------------------------------------------------------------- fixed point


def saturate(values: np.ndarray) -> tuple[np.ndarray, int]:
    """Clamp an integer array into int32, returning the clamp count."""
    values = np.asarray(values, dtype=np.int64)
    over = (values > INT32_MAX) | (values < INT32_MIN)
    n = int(np.count_nonzero(over))
    if n:
        values = np.clip(values, INT32_MIN, INT32_MAX)
    return values.astype(np.int32), n


@dataclass
class FixedTensor:
    """Signed Q(31-F).F tensor.

    ``saturations`` is the number of elements clamped by the operation that
    produced this tensor (not a running total).
    """

    values: np.ndarray
    frac_bits: int = DEFAULT_FRAC_BITS
    saturations: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype != np.int32:
            raise ContractViolation(f"FixedTensor values must be int32, got {self.values.dtype}")
        if not 0 <= self.frac_bits <= 30:
            raise ContractViolation(f"frac_bits must be in [0, 30], got {self.frac_bits}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @classmethod
    def from_float(cls, x, frac_bits: int = DEFAULT_FRAC_BITS) -> "FixedTensor":
        """Round-to-nearest (ties to even) quantization; out-of-range values saturate."""
        scaled = np.rint(np.ldexp(np.asarray(x, dtype=np.float64), frac_bits))
        clipped = np.clip(scaled, INT32_MIN, INT32_MAX)
        n = int(np.count_nonzero(clipped != scaled))
        return cls(clipped.astype(np.int32), frac_bits, n)

    def to_float(self) -> np.ndarray:
        return np.ldexp(self.values.astype(np.float64), -self.frac_bits)

    def reshape(self, *shape) -> "FixedTensor":
        return FixedTensor(self.values.reshape(*shape), self.frac_bits)


def shift_scale(x: FixedTensor, k: int) -> FixedTensor:
    """Multiply every element by 2**k using shifts only."""
    k = int(k)
    if not -31 <= k <= 31:
        raise ContractViolation(f"shift exponent {k} outside [-31, 31]")
    if k == 0:
        return FixedTensor(x.values.copy(), x.frac_bits)
    if k < 0:
        return FixedTensor(np.right_shift(x.values, -k), x.frac_bits)
    values, n = saturate(np.left_shift(x.values.astype(np.int64), k))
    return FixedTensor(values, x.frac_bits, n)


def fixed_add(x: FixedTensor, y: FixedTensor) -> FixedTensor:
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.frac_bits != y.frac_bits:
        raise ContractViolation(f"format mismatch: Q.{x.frac_bits} vs Q.{y.frac_bits}")
    values, n = saturate(x.values.astype(np.int64) + y.values.astype(np.int64))
    return FixedTensor(values, x.frac_bits, n)


def fixed_sub(x: FixedTensor, y: FixedTensor) -> FixedTensor:
    if x.shape != y.shape or x.frac_bits != y.frac_bits:
        raise ContractViolation("operands must share shape and format")
    values, n = saturate(x.values.astype(np.int64) - y.values.astype(np.int64))
    return FixedTensor(values, x.frac_bits, n)
