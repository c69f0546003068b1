import json

import numpy as np
import pytest

from abbnn.bitcore import INT32_MAX, INT32_MIN, FixedTensor, pack_bits
from abbnn.engine import ALU, OpCounters, infer, oracle_agreement, verify
from abbnn.errors import ContractViolation
from abbnn.exporter import (
    BlockBegin,
    BlockEnd,
    FoldedModel,
    Input,
    PackedConv,
    ShiftPReLU,
    Threshold,
    fold,
)
from abbnn.graphspec import load_spec

from conftest import perturbed_step2_state

F = 16


def packed_conv(W_pm1, kappa, stride=1, pad=0):
    O, C, kh, kw = W_pm1.shape
    return PackedConv(O, C, kh, kw, stride, pad, np.asarray(kappa, dtype=np.int8), pack_bits(W_pm1.reshape(O, -1) > 0))


def raw(values):
    return FixedTensor(np.asarray(values, dtype=np.int32), F)


def test_threshold_example(backend):
    model = FoldedModel(F, [Input(1, 1, 1), Threshold(1, np.array([2], np.int32)), packed_conv(np.ones((1, 1, 1, 1)), [0])])
    out, _ = infer(model, raw(np.array([3, 2, 1]).reshape(3, 1, 1, 1)))
    assert list(out.values.ravel()) == [1 << F, 1 << F, -(1 << F)]


def naive_pm1_conv(s, W, stride, pad):
    N, C, H, Wd = s.shape
    O, _, kh, kw = W.shape
    sp = np.pad(s, ((0, 0), (0, 0), (pad, pad), (pad, pad)))  # zero padding contributes nothing
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (Wd + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo), dtype=np.int64)
    for i in range(Ho):
        for j in range(Wo):
            patch = sp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, W)
    return out


def test_binconv_exact_on_random_shapes(backend):
    rng = np.random.default_rng(2023)
    for _ in range(500):
        C, O = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
        H = int(rng.integers(k, 7))
        W = rng.choice([-1, 1], size=(O, C, k, k))
        kappa = rng.integers(-6, 3, size=O)
        b = rng.integers(-100, 100, size=C).astype(np.int32)
        model = FoldedModel(F, [Input(C, H, H), Threshold(C, b), packed_conv(W, kappa, stride, pad)])
        x = rng.integers(-100, 100, size=(2, C, H, H))
        out, c = infer(model, raw(x))
        s = np.where(x >= b[None, :, None, None], 1, -1)
        expect = naive_pm1_conv(s, W, stride, pad) * 2.0 ** (F + kappa[None, :, None, None])
        assert np.array_equal(out.values, np.floor(expect).astype(np.int64))
        assert c.multiplications == 0


@pytest.mark.parametrize("seed", range(5))
def test_shift_prelu_matches_integer_oracle(seed):
    rng = np.random.default_rng(seed)
    C = 4
    exp = rng.integers(-8, 4, size=C).astype(np.int8)
    xi1 = rng.integers(-(2**20), 2**20, size=C).astype(np.int32)
    xi2 = rng.integers(-(2**20), 2**20, size=C).astype(np.int32)
    model = FoldedModel(F, [Input(C, 3, 3), ShiftPReLU(C, exp, xi1, xi2)])
    x = rng.integers(-(2**24), 2**24, size=(5, C, 3, 3))
    out, c = infer(model, raw(x))
    expect = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        v, ch = int(x[idx]), idx[1]
        if v >= 0:
            expect[idx] = v
        else:
            t = v + int(xi1[ch])
            t = t << int(exp[ch]) if exp[ch] >= 0 else t >> -int(exp[ch])  # python >> floors
            expect[idx] = min(max(t + int(xi2[ch]), INT32_MIN), INT32_MAX)
    assert np.array_equal(out.values, expect)
    assert c.multiplications == 0 and c.comparisons == x.size


def test_residual_shift_then_add():
    model = FoldedModel(F, [Input(1, 2, 2), BlockBegin(), ShiftPReLU(1, np.zeros(1, np.int8), np.zeros(1, np.int32), np.zeros(1, np.int32)),
                            BlockEnd(-2, False, 1)])
    x = np.array([[[[40, -8], [3, 0]]]])
    out, c = infer(model, raw(x))
    assert np.array_equal(out.values, x + (x >> 2))
    assert c.multiplications == 0


def test_saturation_budget_warning():
    model = FoldedModel(F, [Input(1, 1, 2), ShiftPReLU(1, np.array([20], np.int8), np.zeros(1, np.int32), np.zeros(1, np.int32))])
    x = raw(np.array([[[[-(2**20), 5]]]]))
    res = infer(model, x)
    assert res.logits.values.ravel()[0] == INT32_MIN
    assert res.counters.saturations == 1 == res.logits.saturations
    assert res.warnings and "budget" in res.warnings[0]
    assert infer(model, x, saturation_budget=5).warnings == []


def test_input_mismatches(folded):
    shape = (2,) + tuple(folded.input_shape)
    with pytest.raises(ContractViolation):
        infer(folded, np.zeros(shape, dtype=np.int32))
    with pytest.raises(ContractViolation):
        infer(folded, FixedTensor(np.zeros(shape, np.int32), 12))
    with pytest.raises(ContractViolation):
        infer(folded, FixedTensor(np.zeros((2, 1, 8, 8), np.int32), F))


def test_packed_layer_needs_bits():
    model = FoldedModel(F, [Input(1, 1, 1), packed_conv(np.ones((1, 1, 1, 1)), [0])])
    with pytest.raises(ContractViolation):
        infer(model, raw(np.ones((1, 1, 1, 1))))


# --------------------------------------------------------------------------- whole models


def bundled_models():
    out = {}
    for name in ("toy2block", "toy_dense"):
        out[name] = fold(perturbed_step2_state(load_spec(name), seed=4))
    return out


@pytest.mark.parametrize("name", ["toy2block", "toy_dense"])
def test_zero_multiplications_on_core_layers(name, backend):
    model = bundled_models()[name]
    x = FixedTensor.from_float(np.random.default_rng(0).normal(size=(64,) + tuple(model.input_shape)), F)
    res = infer(model, x)
    assert res.core.multiplications == 0
    assert res.boundary.multiplications > 0
    strict = infer(model, x, strict=True)
    assert strict.counters.multiplications == 0
    assert np.array_equal(strict.logits.values, res.logits.values)


def test_determinism(folded, backend):
    x = FixedTensor.from_float(np.random.default_rng(9).normal(size=(32,) + tuple(folded.input_shape)), F)
    a, b = infer(folded, x), infer(folded, x)
    assert np.array_equal(a.logits.values, b.logits.values) and a.counters == b.counters


def test_backends_agree_on_model(folded, monkeypatch):
    from abbnn import kernels

    x = FixedTensor.from_float(np.random.default_rng(10).normal(size=(16,) + tuple(folded.input_shape)), F)
    outs = []
    for impl in kernels.IMPLEMENTATIONS.values():
        monkeypatch.setattr(kernels, "xnor_popcount_matmul", impl["xnor_popcount_matmul"])
        outs.append(infer(folded, x).logits.values)
    assert all(np.array_equal(outs[0], o) for o in outs)


def test_counters_are_monotone(folded):
    res = infer(folded, FixedTensor.from_float(np.zeros((3,) + tuple(folded.input_shape)), F))
    cum = res.cumulative()
    assert all(later >= earlier for earlier, later in zip(cum, cum[1:]))
    assert cum[-1] == res.counters
    assert res.core + res.boundary == res.counters


def test_alu_counts():
    alu = ALU()
    alu.add(np.ones(3, np.int64), np.ones(3, np.int64))
    alu.shift(np.array([8, -8]), -2)
    alu.compare_ge(np.ones(4, np.int64), 0)
    with pytest.raises(TypeError):
        alu.add(np.ones(2), np.ones(2))  # real values never reach the integer datapath
    assert alu.c == OpCounters(additions=3, shifts=2, comparisons=4)
    assert list(ALU().shift(np.array([-3, 3]), -1)) == [-2, 1]


def test_oracle_agreement(folded):
    x = np.random.default_rng(5).normal(size=(300,) + tuple(folded.input_shape))
    rep = oracle_agreement(folded, x)
    assert rep["argmax_agreement"] >= 0.99
    assert rep["max_sign_distance"] <= 2.0 ** (-F - 1)
    assert rep["multiplications_core"] == 0


# --------------------------------------------------------------------------- verify


def test_verify_fresh_model(trained_state, folded):
    rep = verify(folded, trained_state, n_probes=100)
    assert rep.ok and not rep.diverged
    assert rep.sign_agreement >= 0.999
    assert rep.max_local_distance <= rep.local_bound == 2.0 ** -17
    assert rep.counters["core"]["multiplications"] == 0
    assert json.loads(rep.to_json())["probes"] == 100


def test_verify_flags_corrupted_kappa(trained_state, folded):
    bad = FoldedModel(folded.frac_bits, list(folded.layers), folded.reference)
    i = next(k for k, l in enumerate(bad.layers) if isinstance(l, PackedConv))
    l = bad.layers[i]
    bad.layers[i] = PackedConv(l.c_out, l.c_in, l.kh, l.kw, l.stride, l.pad, (l.kappa_exp + 4).astype(np.int8), l.words)
    rep = verify(bad, trained_state, n_probes=100)
    assert rep.diverged and rep.notes
    assert rep.logit_max_rel > 1e-2


def test_verify_zero_probes(trained_state, folded):
    rep = verify(folded, trained_state, n_probes=0)
    assert rep.probes == 0 and rep.sign_agreement is None and rep.ok
    assert "n/a" in rep.table()
    json.loads(rep.to_json())


def test_verify_rejects_other_spec(trained_state, folded):
    with pytest.raises(ContractViolation):
        verify(folded, trained_state, load_spec("toy_dense"))
