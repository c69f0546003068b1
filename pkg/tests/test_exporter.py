import numpy as np
import pytest

from abbnn.bitcore import FixedTensor
from abbnn.engine import infer
from abbnn.errors import ContractViolation, ExportError, FormatError, IntegrityError, TruncatedError
from abbnn.exporter import (
    BOUNDARY_TYPES,
    FoldedModel,
    PackedConv,
    ShiftPReLU,
    Threshold,
    dumps,
    float_forward,
    fold,
    loads,
    no_real_multipliers,
    read_abnn,
    to_fixed,
    write_abnn,
)
from abbnn.graphspec import load_spec
from abbnn.nfgraph import Network, pname

from conftest import perturbed_step2_state


def first_sign_layer(state):
    return next(r for r in state.spec.resolve() if r.kind == "maskedsign")


def test_threshold_example_raw_value():
    state = perturbed_step2_state(load_spec("toy2block"))
    r = first_sign_layer(state)
    state.params[pname(r.index, "xi")][:] = 0.5
    state.betas[r.block] = 4.0
    model = fold(state)
    th = next(l for l in model.layers if isinstance(l, Threshold))
    assert np.all(th.b == -131072)


def test_zero_offset_threshold_is_zero():
    state = perturbed_step2_state(load_spec("toy2block"))
    r = first_sign_layer(state)
    state.params[pname(r.index, "xi")][:] = 0.0
    state.betas[r.block] = 3.7
    th = next(l for l in fold(state).layers if isinstance(l, Threshold))
    assert not th.b.any()


@pytest.mark.parametrize("spec_name", ["toy2block", "toy_dense"])
def test_fold_matches_training_graph(spec_name):
    spec = load_spec(spec_name)
    state = perturbed_step2_state(spec, seed=3)
    model = fold(state)
    x = np.random.default_rng(0).normal(size=(50,) + tuple(spec.input_shape))
    ref, tape = Network(spec).forward(state, x, "step2", record=True)
    got, signs = float_forward(model, x, record=True)
    assert np.allclose(got, ref.reshape(got.shape), rtol=1e-12, atol=1e-12)
    assert len(signs) == len(tape.signs)
    for pos, s in signs.items():
        assert np.array_equal(s, tape.signs[pos - 1])  # folded position = spec index + 1


def test_folded_model_holds_only_integers(folded):
    assert no_real_multipliers(folded) == []
    assert any(isinstance(l, PackedConv) for l in folded.layers)
    assert all(l.kappa_exp.dtype == np.int8 for l in folded.layers if isinstance(l, PackedConv))
    assert all(l.exp.dtype == np.int8 for l in folded.layers if isinstance(l, ShiftPReLU))


def test_structural_scan_flags_floats(folded):
    bad = FoldedModel(folded.frac_bits, list(folded.layers))
    i = next(k for k, l in enumerate(bad.layers) if isinstance(l, Threshold))
    bad.layers[i] = Threshold(bad.layers[i].c, bad.layers[i].b.astype(np.float64))
    assert no_real_multipliers(bad) == [f"layer {i} (Threshold).b"]


# --------------------------------------------------------------------------- fold errors


def test_fold_requires_step2(trained):
    state = perturbed_step2_state(load_spec("toy2block"))
    state.phase = "step1"
    with pytest.raises(ExportError, match="step2"):
        fold(state)


def test_fold_degenerate_row_names_channel():
    state = perturbed_step2_state(load_spec("toy2block"))
    r = next(r for r in state.spec.resolve() if r.kind == "binconv")
    state.params[pname(r.index, "W")][2] = 0.7
    with pytest.raises(ExportError, match="channel 2"):
        fold(state)


def test_fold_out_of_range_constant():
    state = perturbed_step2_state(load_spec("toy2block"))
    r = first_sign_layer(state)
    state.params[pname(r.index, "xi")][1] = -1e6
    with pytest.raises(ExportError, match="not representable"):
        fold(state)


def test_fold_spec_mismatch():
    from abbnn.errors import CheckpointMismatch

    with pytest.raises(CheckpointMismatch):
        fold(perturbed_step2_state(load_spec("toy2block")), load_spec("toy_dense"))


def test_to_fixed():
    assert list(to_fixed([-2.0, 0.5, 2**-17], 16, "x")) == [-131072, 32768, 0]
    with pytest.raises(ExportError):
        to_fixed([np.inf], 16, "x")
    with pytest.raises(ExportError):
        to_fixed([40000.0], 16, "x")


# --------------------------------------------------------------------------- serialization


def test_write_read_write_is_byte_identical(tmp_path, folded):
    write_abnn(folded, tmp_path / "a.abnn")
    back = read_abnn(tmp_path / "a.abnn")
    write_abnn(back, tmp_path / "b.abnn")
    assert (tmp_path / "a.abnn").read_bytes() == (tmp_path / "b.abnn").read_bytes()
    assert back == folded


def test_truncated_file_reports_section(folded):
    blob = dumps(folded)
    for cut in (10, 30, len(blob) // 3, len(blob) - 7):
        with pytest.raises(TruncatedError) as exc:
            loads(blob[:cut])
        assert str(exc.value).startswith("unexpected end of section")


def test_crc_mismatch_names_section(folded):
    blob = bytearray(dumps(folded))
    blob[len(blob) // 2] ^= 0x10
    with pytest.raises(IntegrityError) as exc:
        loads(bytes(blob))
    assert exc.value.section == "body"
    assert "body" in str(exc.value)


def test_out_of_range_exponent_is_format_error(folded):
    bad = FoldedModel(folded.frac_bits, list(folded.layers))
    i = next(k for k, l in enumerate(bad.layers) if isinstance(l, PackedConv))
    layer = bad.layers[i]
    k = layer.kappa_exp.copy()
    k[0] = 100
    bad.layers[i] = PackedConv(layer.c_out, layer.c_in, layer.kh, layer.kw, layer.stride, layer.pad, k, layer.words)
    with pytest.raises(FormatError, match="exponent"):
        loads(dumps(bad))


def test_float_constant_cannot_be_written(folded):
    bad = FoldedModel(folded.frac_bits, list(folded.layers))
    i = next(k for k, l in enumerate(bad.layers) if isinstance(l, Threshold))
    bad.layers[i] = Threshold(bad.layers[i].c, bad.layers[i].b + 0.5)
    with pytest.raises(ExportError):
        dumps(bad)


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"ABNX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x02" + b[5:], "version"),
    ],
)
def test_header_errors(folded, mutate, match):
    with pytest.raises(FormatError, match=match):
        loads(mutate(dumps(folded)))


def test_validate_rejects_broken_topology(folded):
    with pytest.raises(ContractViolation):
        FoldedModel(16, folded.layers[1:]).validate()
    with pytest.raises(ContractViolation):
        FoldedModel(16, folded.layers[:-3]).shapes()


def test_reference_is_not_serialized(folded):
    back = loads(dumps(folded))
    assert back.reference == {} and folded.reference
    assert not any(isinstance(l, BOUNDARY_TYPES) and l is None for l in back.layers)


def test_other_frac_bits_honoured_by_engine(trained_state):
    model = fold(trained_state, frac_bits=12)
    assert loads(dumps(model)).frac_bits == 12
    x = np.random.default_rng(1).normal(size=(200,) + tuple(trained_state.spec.input_shape))
    logits, _ = infer(model, FixedTensor.from_float(x, 12))
    assert logits.frac_bits == 12
    ref, _ = float_forward(model, x)
    assert (logits.to_float().reshape(ref.shape).argmax(1) == ref.argmax(1)).mean() >= 0.97
    with pytest.raises(ContractViolation):
        infer(model, FixedTensor.from_float(x, 16))
