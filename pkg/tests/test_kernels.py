import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abbnn import kernels
from abbnn.bitcore import n_words, pack_bits

IMPLS = sorted(kernels.IMPLEMENTATIONS)


@pytest.mark.parametrize("name", IMPLS)
def test_popcount_matches_python(name):
    rng = np.random.default_rng(0)
    words = rng.integers(0, 2**64 - 1, size=500, dtype=np.uint64, endpoint=True)
    words[:3] = [0, 2**64 - 1, 1 << 63]
    got = kernels.IMPLEMENTATIONS[name]["popcount64"](words)
    assert list(got) == [bin(int(w)).count("1") for w in words]


def test_swar_fallback_matches_bitwise_count():
    words = np.random.default_rng(1).integers(0, 2**63, size=300, dtype=np.uint64)
    assert np.array_equal(kernels._swar_popcount_numpy(words), kernels.popcount64_numpy(words))


def naive_pm1_matmul(a, w, valid):
    """Oracle on unpacked ±1 values; invalid positions contribute 0."""
    return ((a * w[:, None, :]).transpose(1, 0, 2) * valid[:, None, :]).sum(-1)


@pytest.mark.parametrize("name", IMPLS)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(1, 200), st.integers(0, 2**31))
def test_xnor_popcount_matmul_oracle(name, P, O, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.choice([-1, 1], (P, n))
    w = rng.choice([-1, 1], (O, n))
    valid = rng.random((P, n)) < 0.8
    out = kernels.IMPLEMENTATIONS[name]["xnor_popcount_matmul"](
        pack_bits(a > 0), pack_bits(valid), pack_bits(w > 0), valid.sum(axis=1)
    )
    assert out.shape == (P, O)
    assert np.array_equal(out, naive_pm1_matmul(a, w, valid))


@pytest.mark.parametrize("name", IMPLS)
@given(st.integers(1, 10), st.integers(1, 5), st.integers(1, 40), st.integers(0, 2**31))
def test_shift_add_matmul_equals_product(name, P, O, N, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-(2**24), 2**24, size=(P, N))
    w = rng.integers(-(2**20), 2**20, size=(O, N))
    assert np.array_equal(kernels.IMPLEMENTATIONS[name]["shift_add_matmul"](x, w), x @ w.T)


def test_backends_agree_on_large_case():
    if len(IMPLS) < 2:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(5)
    n = 700
    a = pack_bits(rng.random((300, n)) < 0.5)
    w = pack_bits(rng.random((40, n)) < 0.5)
    valid = np.tile(pack_bits(np.ones(n, dtype=bool)), (300, 1))
    nv = np.full(300, n)
    outs = [kernels.IMPLEMENTATIONS[k]["xnor_popcount_matmul"](a, valid, w, nv) for k in IMPLS]
    assert a.shape[1] == n_words(n)
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, ABBNN_NO_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from abbnn import kernels; print(kernels.BACKEND, kernels.xnor_popcount_matmul.__name__)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.split() == ["numpy", "xnor_popcount_matmul_numpy"]
