import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abbnn.bitcore import (
    INT32_MAX,
    INT32_MIN,
    BitTensor,
    FixedTensor,
    fixed_add,
    fixed_sub,
    n_words,
    pack_bits,
    pack_signs,
    shift_scale,
    unpack_bits,
    xnor_popcount_dot,
)
from abbnn.errors import ContractViolation


def naive_dot(a, b):
    return int(sum(int(x) * int(y) for x, y in zip(a, b)))


def signs(v):
    return np.array([1 if x >= 0 else -1 for x in v], dtype=np.int8)


# --------------------------------------------------------------------------- pack_signs


def test_pack_signs_sign_of_zero_is_plus_one():
    t = pack_signs([1.5, -0.2, 0.0, -7.0])
    assert list(t.to_bits()) == [True, False, True, False]
    assert int(t.words[0]) == 0b0101


def test_pack_all_positive_64_is_one_full_word():
    t = pack_signs(np.ones(64))
    assert t.words.shape == (1,)
    assert int(t.words[0]) == 2**64 - 1
    assert t.pad_bits == 0


def test_pack_random_100_matches_scalar_sign_loop():
    v = np.random.default_rng(0).normal(size=100)
    assert np.array_equal(pack_signs(v).unpack(), signs(v))


@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=300))
def test_pack_unpack_roundtrip(values):
    v = np.array(values, dtype=np.int8)
    t = pack_signs(v)
    assert np.array_equal(t.unpack(), v)
    # padding bits stay zero
    if t.pad_bits:
        assert int(t.words[-1]) >> (64 - t.pad_bits) == 0


@given(st.integers(1, 5), st.integers(1, 200))
def test_pack_bits_multi_row(rows, length):
    bits = np.random.default_rng(rows * 1000 + length).random((rows, length)) < 0.5
    words = pack_bits(bits)
    assert words.shape == (rows, n_words(length))
    assert np.array_equal(unpack_bits(words, length), bits)


def test_bittensor_rejects_wrong_word_shape():
    with pytest.raises(ContractViolation):
        BitTensor((65,), np.zeros(1, dtype=np.uint64))


# --------------------------------------------------------------------------- xnor_popcount_dot


def test_xnor_dot_identical_vectors(backend):
    a = pack_signs(np.array([1, -1, 1, 1, -1, -1, 1, -1]))
    assert xnor_popcount_dot(a, a, 8) == 8


def test_xnor_dot_hand_example(backend):
    a = pack_signs(np.array([1, 1, -1, 1]))
    b = pack_signs(np.array([1, -1, -1, -1]))
    assert xnor_popcount_dot(a, b, 4) == 0


def test_xnor_dot_complement(backend):
    v = np.array([1, -1, 1, 1, -1, -1, 1, -1])
    assert xnor_popcount_dot(pack_signs(v), pack_signs(-v), 8) == -8


def test_xnor_dot_1000_random_pairs(backend):
    rng = np.random.default_rng(2023)
    for _ in range(1000):
        n = int(rng.integers(1, 301))
        a = rng.choice([-1, 1], n)
        b = rng.choice([-1, 1], n)
        assert xnor_popcount_dot(pack_signs(a), pack_signs(b)) == naive_dot(a, b)


@given(st.data())
def test_xnor_dot_property(data):
    n = data.draw(st.integers(1, 300))
    a = data.draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n))
    b = data.draw(st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n))
    assert xnor_popcount_dot(pack_signs(a), pack_signs(b), n) == naive_dot(a, b)


def test_xnor_dot_length_mismatch():
    a = pack_signs(np.ones(8))
    with pytest.raises(ContractViolation):
        xnor_popcount_dot(a, pack_signs(np.ones(9)))
    with pytest.raises(ContractViolation):
        xnor_popcount_dot(a, a, 7)


# --------------------------------------------------------------------------- fixed point


def raw(values, frac_bits=16):
    return FixedTensor(np.asarray(values, dtype=np.int32), frac_bits)


@pytest.mark.parametrize("value,k,expected", [(40, -2, 10), (3, -1, 1), (-3, -1, -2)])
def test_shift_scale_examples(value, k, expected):
    assert shift_scale(raw([value]), k).values[0] == expected


def test_shift_scale_left_saturates_and_counts():
    out = shift_scale(raw([2**30, -(2**30), 5]), 2)
    assert list(out.values) == [INT32_MAX, INT32_MIN, 20]
    assert out.saturations == 2


@pytest.mark.parametrize("k", [-32, 32])
def test_shift_scale_range(k):
    with pytest.raises(ContractViolation):
        shift_scale(raw([1]), k)


@given(st.integers(0, 31), st.lists(st.integers(-(2**20), 2**20), min_size=1, max_size=20))
def test_shift_roundtrip_when_low_bits_zero(k, values):
    x = raw(np.array(values, dtype=np.int64) << min(k, 10))
    up = shift_scale(x, k)
    if up.saturations == 0:
        assert np.array_equal(shift_scale(up, -k).values, x.values)


def test_fixed_add_identity():
    x = raw([1, -7, 123456])
    assert np.array_equal(fixed_add(raw([0, 0, 0]), x).values, x.values)


def test_fixed_add_saturation():
    out = fixed_add(raw([INT32_MAX]), raw([1]))
    assert out.values[0] == INT32_MAX
    assert out.saturations == 1


@given(st.lists(st.tuples(st.integers(INT32_MIN, INT32_MAX), st.integers(INT32_MIN, INT32_MAX)), min_size=1, max_size=30))
def test_fixed_add_matches_widened_oracle(pairs):
    a = np.array([p[0] for p in pairs], dtype=np.int64)
    b = np.array([p[1] for p in pairs], dtype=np.int64)
    out = fixed_add(raw(a), raw(b))
    wide = a + b
    inside = (wide >= INT32_MIN) & (wide <= INT32_MAX)
    assert np.array_equal(out.values[inside], wide[inside])
    assert out.saturations == int((~inside).sum())
    assert np.all(out.values[~inside] == np.where(wide[~inside] > 0, INT32_MAX, INT32_MIN))


def test_fixed_add_mismatch():
    with pytest.raises(ContractViolation):
        fixed_add(raw([1, 2]), raw([1]))
    with pytest.raises(ContractViolation):
        fixed_add(raw([1], 16), raw([1], 12))
    with pytest.raises(ContractViolation):
        fixed_sub(raw([1], 16), raw([1], 12))


def test_fixed_sub():
    assert list(fixed_sub(raw([5, INT32_MIN]), raw([7, 1])).values) == [-2, INT32_MIN]


@given(st.lists(st.floats(-30000, 30000, allow_nan=False), min_size=1, max_size=50), st.integers(0, 16))
def test_from_float_error_bound(values, frac_bits):
    x = np.array(values)
    t = FixedTensor.from_float(x, frac_bits)
    assert t.saturations == 0
    assert np.all(np.abs(t.to_float() - x) <= 2.0 ** (-frac_bits - 1))


def test_from_float_counts_saturation():
    t = FixedTensor.from_float([1e9, -1e9, 0.5])
    assert t.saturations == 2
    assert t.values[0] == INT32_MAX and t.values[1] == INT32_MIN


def test_fixed_tensor_requires_int32():
    with pytest.raises(ContractViolation):
        FixedTensor(np.zeros(3, dtype=np.int64))
