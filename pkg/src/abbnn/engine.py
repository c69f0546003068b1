"""Multiplication-free execution of a FoldedModel on fixed-point inputs.

Every arithmetic operation goes through one :class:`ALU` per layer, which
counts it by class. Core (non-boundary) layers only use XNOR-popcount,
add/subtract, compare and shift. Boundary layers (the full-precision first
conv and last dense) use a fixed-point multiply by default, or a shift-add
expansion of each weight under ``strict``.

Values travel as int64 arrays holding int32-range raw Q.F numbers; every
layer output is saturated back into int32 range and clamps are counted.
Accumulators (popcounts, products) are wide and never clamped mid-sum.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .bitcore import INT32_MAX, INT32_MIN, FixedTensor, pack_bits
from .errors import ContractViolation
from .exporter import (
    BOUNDARY_TYPES,
    AvgPool,
    BlockBegin,
    BlockEnd,
    FixedConv,
    FixedDense,
    Flatten,
    FoldedModel,
    Input,
    PackedConv,
    PackedDense,
    ShiftPReLU,
    Threshold,
    float_forward,
)

log = logging.getLogger(__name__)


@dataclass
class OpCounters:
    multiplications: int = 0
    additions: int = 0
    shifts: int = 0
    xnor_popcounts: int = 0
    comparisons: int = 0
    saturations: int = 0

    def __add__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def __ge__(self, other: "OpCounters") -> bool:
        return all(getattr(self, f.name) >= getattr(other, f.name) for f in fields(self))

    def as_dict(self) -> dict:
        return asdict(self)


class ALU:
    """The single choke point for arithmetic; each method counts what it does."""

    def __init__(self, counters: OpCounters | None = None):
        self.c = counters if counters is not None else OpCounters()

    def add(self, a, b):
        out = np.add(a, b, dtype=np.int64)
        self.c.additions += out.size
        return out

    def sub(self, a, b):
        out = np.subtract(a, b, dtype=np.int64)
        self.c.additions += out.size
        return out

    def shift(self, a, k):
        """``a * 2**k`` for integer ``k`` (scalar or broadcastable); right shifts floor."""
        a = np.asarray(a, dtype=np.int64)
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), a.shape)
        out = np.where(k >= 0, np.left_shift(a, np.maximum(k, 0)), np.right_shift(a, np.maximum(-k, 0)))
        self.c.shifts += a.size
        return out

    def compare_ge(self, a, b):
        out = np.greater_equal(a, b)
        self.c.comparisons += out.size
        return out

    def compare_lt(self, a, b):
        out = np.less(a, b)
        self.c.comparisons += out.size
        return out

    def saturate(self, a):
        a = np.asarray(a, dtype=np.int64)
        over = (a > INT32_MAX) | (a < INT32_MIN)
        n = int(np.count_nonzero(over))
        if n:
            self.c.saturations += n
            a = np.clip(a, INT32_MIN, INT32_MAX)
        return a

    def xnor_popcount(self, a, valid, w, n_valid):
        P, nw = a.shape
        O = w.shape[0]
        out = kernels.xnor_popcount_matmul(a, valid, w, n_valid)
        self.c.xnor_popcounts += P * O * nw
        # word sums, then the doubling shift and the -n_valid correction
        self.c.additions += P * O * nw
        self.c.shifts += P * O
        return out

    def multiply_matmul(self, x, w):
        """Fixed-point product sums with a hardware multiplier (boundary layers only)."""
        x = np.asarray(x, dtype=np.int64)
        w = np.asarray(w, dtype=np.int64)
        P, N = x.shape
        O = w.shape[0]
        self.c.multiplications += P * O * N
        self.c.additions += P * O * max(N - 1, 0)
        return x @ w.T

    def shift_add_matmul(self, x, w):
        """Same product sums from the binary expansion of each weight."""
        P = x.shape[0]
        terms = int(kernels.popcount64_numpy(np.abs(np.asarray(w, dtype=np.int64)).astype(np.uint64)).sum())
        out = kernels.shift_add_matmul(x, w)
        self.c.shifts += P * terms
        self.c.additions += P * terms
        return out


# --------------------------------------------------------------------------- helpers


def _patches(x, kh, kw, stride, pad, fill=0):
    """(N, C, H, W) -> (N * Ho * Wo, C * kh * kw) with row order (c, kh, kw)."""
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw), Ho, Wo


def _chan(v, ndim):
    return np.asarray(v).reshape((-1,) + (1,) * (ndim - 2))


def _pool(alu: ALU, x):
    s = alu.add(alu.add(x[..., ::2, ::2], x[..., ::2, 1::2]), alu.add(x[..., 1::2, ::2], x[..., 1::2, 1::2]))
    return alu.saturate(alu.shift(s, -2))


@dataclass
class LayerRecord:
    index: int
    kind: str
    boundary: bool
    counters: OpCounters


@dataclass
class InferenceResult:
    logits: FixedTensor
    counters: OpCounters
    layers: list[LayerRecord]
    warnings: list[str] = field(default_factory=list)
    trace: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.logits, self.counters))

    @property
    def core(self) -> OpCounters:
        return sum((r.counters for r in self.layers if not r.boundary), OpCounters())

    @property
    def boundary(self) -> OpCounters:
        return sum((r.counters for r in self.layers if r.boundary), OpCounters())

    def cumulative(self) -> list[OpCounters]:
        out, acc = [], OpCounters()
        for r in self.layers:
            acc = acc + r.counters
            out.append(acc)
        return out

    def summary(self) -> dict:
        return {"total": self.counters.as_dict(), "core": self.core.as_dict(), "boundary": self.boundary.as_dict()}


# --------------------------------------------------------------------------- inference


def infer(model: FoldedModel, x: FixedTensor, strict: bool = False, *, saturation_budget: int = 0,
          trace: bool = False) -> InferenceResult:
    """Run the folded network. Unpacks as ``logits, counters = infer(...)``.

    With ``trace`` the result carries, for every threshold layer, its raw
    input and the produced bits, keyed by layer position.
    """
    if not isinstance(x, FixedTensor):
        raise ContractViolation("engine input must be a FixedTensor")
    if x.frac_bits != model.frac_bits:
        raise ContractViolation(f"input is Q.{x.frac_bits} but the model is Q.{model.frac_bits}")
    v = x.values.astype(np.int64)
    if v.ndim == 3:
        v = v[None]
    if tuple(v.shape[1:]) != tuple(model.input_shape):
        raise ContractViolation(f"input shape {v.shape[1:]} does not match {model.input_shape}")
    F = model.frac_bits
    N = v.shape[0]
    records: list[LayerRecord] = []
    traced: dict = {}
    stack = []
    for i, layer in enumerate(model.layers):
        alu = ALU()
        if isinstance(layer, Input):
            pass
        elif isinstance(layer, FixedConv):
            cols, Ho, Wo = _patches(v, layer.kh, layer.kw, layer.stride, layer.pad)
            W = layer.weights.reshape(layer.c_out, -1)
            acc = alu.shift_add_matmul(cols, W) if strict else alu.multiply_matmul(cols, W)
            y = alu.add(alu.shift(acc, -F), layer.bias[None, :])
            v = alu.saturate(y).reshape(N, Ho, Wo, layer.c_out).transpose(0, 3, 1, 2)
        elif isinstance(layer, Threshold):
            bits = alu.compare_ge(v, _chan(layer.b, v.ndim).astype(np.int64))
            if trace:
                traced[i] = (v.copy(), bits)
            v = bits
        elif isinstance(layer, PackedConv):
            v = _packed_conv(alu, v, layer, layer.kh, layer.kw, layer.stride, layer.pad, F)
        elif isinstance(layer, PackedDense):
            v = _packed_conv(alu, v, layer, 1, 1, 1, 0, F)
        elif isinstance(layer, ShiftPReLU):
            v = _shift_prelu(alu, v, layer)
        elif isinstance(layer, AvgPool):
            v = _pool(alu, v)
        elif isinstance(layer, BlockBegin):
            stack.append(v)
        elif isinstance(layer, BlockEnd):
            entry = stack.pop()
            if layer.pool:
                entry = _pool(alu, entry)
            if layer.repeat > 1:
                entry = np.concatenate([entry] * layer.repeat, axis=1)
            v = alu.saturate(alu.add(entry, alu.shift(v, layer.alpha_exp)))
        elif isinstance(layer, Flatten):
            v = v.reshape(N, -1, 1, 1)
        elif isinstance(layer, FixedDense):
            flat = v.reshape(N, -1)
            acc = alu.shift_add_matmul(flat, layer.weights) if strict else alu.multiply_matmul(flat, layer.weights)
            v = alu.saturate(alu.add(alu.shift(acc, -F), layer.bias[None, :]))
        else:  # pragma: no cover
            raise ContractViolation(f"layer {i}: unsupported type {type(layer).__name__}")
        records.append(LayerRecord(i, type(layer).__name__, isinstance(layer, BOUNDARY_TYPES), alu.c))
    if v.dtype == bool:
        raise ContractViolation("model ends in a threshold layer; logits must be fixed point")
    total = sum((r.counters for r in records), OpCounters())
    warnings = []
    if total.saturations > saturation_budget:
        msg = f"{total.saturations} saturations exceed the budget of {saturation_budget}"
        log.warning(msg)
        warnings.append(msg)
    logits = FixedTensor(v.astype(np.int32), F, total.saturations)
    return InferenceResult(logits, total, records, warnings, traced)


def _packed_conv(alu: ALU, bits, layer, kh, kw, stride, pad, F):
    if bits.dtype != bool:
        raise ContractViolation(f"{type(layer).__name__} must follow a threshold layer")
    N = bits.shape[0]
    cols, Ho, Wo = _patches(bits, kh, kw, stride, pad, fill=False)
    ones = np.ones((1,) + bits.shape[1:], dtype=bool)
    valid_cols, _, _ = _patches(ones, kh, kw, stride, pad, fill=False)
    a = pack_bits(cols)
    valid = np.tile(pack_bits(valid_cols), (N, 1))
    n_valid = np.tile(np.count_nonzero(valid_cols, axis=1), N)
    if cols.shape[1] != layer.fan_in or a.shape[1] != layer.words.shape[1]:
        raise ContractViolation(f"packed input rows of {cols.shape[1]} bits do not match fan-in {layer.fan_in}")
    dot = alu.xnor_popcount(a, valid, layer.words, n_valid)
    y = alu.saturate(alu.shift(dot, F + layer.kappa_exp.astype(np.int64)[None, :]))
    O = layer.words.shape[0]
    return y.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)


def _shift_prelu(alu: ALU, v, layer: ShiftPReLU):
    neg = alu.compare_lt(v, 0)
    ch = np.broadcast_to(_chan(np.arange(layer.c), v.ndim), v.shape)[neg]
    t = alu.add(v[neg], layer.xi1[ch])
    t = alu.shift(t, layer.exp[ch])
    t = alu.add(t, layer.xi2[ch])
    out = v.copy()
    out[neg] = t
    return alu.saturate(out)


# --------------------------------------------------------------------------- verification


def local_sign_check(model: FoldedModel, traced: dict) -> dict:
    """Compare each engine sign with the real-threshold decision on the same input.

    Returns counts and the largest distance to the real threshold among
    disagreements; that distance is bounded by the threshold quantization step.
    """
    F = model.frac_bits
    total = disagree = 0
    worst = 0.0
    for i, (x_raw, bits) in traced.items():
        ref = model.reference.get(i, {})
        b_real = ref.get("b", np.ldexp(model.layers[i].b.astype(np.float64), -F))
        x = np.ldexp(x_raw.astype(np.float64), -F)
        real = x >= _chan(b_real, x.ndim)
        diff = real != bits
        total += bits.size
        n = int(np.count_nonzero(diff))
        if n:
            disagree += n
            worst = max(worst, float(np.abs(x - _chan(b_real, x.ndim))[diff].max()))
    return {"signs": total, "disagreements": disagree, "max_distance": worst}


@dataclass
class VerifyReport:
    probes: int
    sign_total: int = 0
    sign_agreement: float | None = None
    local_disagreements: int = 0
    propagated_disagreements: int = 0
    max_local_distance: float = 0.0
    local_bound: float = 0.0
    logit_max_abs: float | None = None
    logit_max_rel: float | None = None
    argmax_agreement: float | None = None
    counters: dict = field(default_factory=dict)
    diverged: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.diverged

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)

    def table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))

        rows = [
            ("probes", self.probes),
            ("sign agreement", self.sign_agreement),
            ("sign values compared", self.sign_total),
            ("local disagreements", self.local_disagreements),
            ("propagated disagreements", self.propagated_disagreements),
            ("max local distance", self.max_local_distance),
            ("local bound", self.local_bound),
            ("logit max abs dev", self.logit_max_abs),
            ("logit max rel dev", self.logit_max_rel),
            ("argmax agreement", self.argmax_agreement),
            ("multiplications (core)", self.counters.get("core", {}).get("multiplications", 0)),
            ("multiplications (total)", self.counters.get("total", {}).get("multiplications", 0)),
            ("diverged", self.diverged),
        ]
        return "\n".join(f"{k:<28}{fmt(v)}" for k, v in rows)


def _check_model_matches(model: FoldedModel, spec) -> list[int]:
    """Map each spec layer to its folded position; raise on any structural mismatch."""
    expect = {
        "firstconv": FixedConv, "maskedsign": Threshold, "binconv": PackedConv, "dense": PackedDense,
        "qrprelu": ShiftPReLU, "rleaky": ShiftPReLU, "avgpool": AvgPool, "block": BlockBegin,
        "end": BlockEnd, "flatten": Flatten, "lastdense": FixedDense,
    }
    resolved = spec.resolve()
    if len(model.layers) != len(resolved) + 1:
        raise ContractViolation(f"model has {len(model.layers) - 1} layers, spec has {len(resolved)}")
    if tuple(model.input_shape) != tuple(spec.input_shape):
        raise ContractViolation(f"model input {model.input_shape} does not match spec {spec.input_shape}")
    shapes = model.shapes()
    for r in resolved:
        layer = model.layers[r.index + 1]
        if not isinstance(layer, expect[r.kind]):
            raise ContractViolation(f"layer {r.index}: spec has '{r.kind}', model has {type(layer).__name__}")
        if tuple(shapes[r.index + 1]) != tuple(r.out_shape):
            raise ContractViolation(f"layer {r.index}: output shape {shapes[r.index + 1]} vs spec {r.out_shape}")
    return [r.index for r in resolved if r.kind == "maskedsign"]


def verify(model: FoldedModel, state, spec=None, n_probes: int = 100, *, seed: int = 2023,
           strict: bool = False, logit_rtol: float = 1e-2, min_argmax: float = 0.99) -> VerifyReport:
    """Dual execution: training graph (eval, step2) vs fixed-point engine on random probes."""
    from .nfgraph import Network

    spec = state.spec if spec is None else spec
    sign_layers = _check_model_matches(model, spec)
    F = model.frac_bits
    report = VerifyReport(n_probes, local_bound=2.0 ** (-F - 1))
    if n_probes <= 0:
        return report
    rng = np.random.default_rng(seed)
    xq = FixedTensor.from_float(rng.normal(size=(n_probes,) + tuple(spec.input_shape)), F)
    x = xq.to_float()
    result = infer(model, xq, strict, trace=True)
    ref_logits, tape = Network(spec).forward(state, x, "step2", record=True)

    local = local_sign_check(model, result.trace)
    agree = total = 0
    for i in sign_layers:
        eng = result.trace[i + 1][1]
        ref = tape.signs[i] >= 0
        agree += int(np.count_nonzero(eng == ref))
        total += eng.size
    report.sign_total = total
    report.sign_agreement = agree / total if total else None
    report.local_disagreements = local["disagreements"]
    report.propagated_disagreements = max(total - agree - local["disagreements"], 0)
    report.max_local_distance = local["max_distance"]

    eng_logits = result.logits.to_float()
    dev = np.abs(eng_logits - ref_logits)
    report.logit_max_abs = float(dev.max())
    report.logit_max_rel = float(dev.max() / max(float(np.abs(ref_logits).max()), 1e-12))
    report.argmax_agreement = float((eng_logits.argmax(axis=1) == ref_logits.argmax(axis=1)).mean())
    report.counters = result.summary()

    if report.max_local_distance > report.local_bound:
        report.notes.append("a sign disagreement lies farther from its threshold than the quantization bound")
    if report.logit_max_rel > logit_rtol:
        report.notes.append(f"logit relative deviation {report.logit_max_rel:.3g} exceeds {logit_rtol:g}")
    if report.argmax_agreement < min_argmax:
        report.notes.append(f"argmax agreement {report.argmax_agreement:.3f} below {min_argmax:g}")
    if report.counters["core"]["multiplications"]:
        report.notes.append("core layers performed multiplications")
    report.diverged = bool(report.notes)
    return report


def oracle_agreement(model: FoldedModel, x_float, strict: bool = False) -> dict:
    """Fixed-point engine vs the folded-float oracle on the same quantized inputs."""
    xq = FixedTensor.from_float(x_float, model.frac_bits)
    result = infer(model, xq, strict, trace=True)
    ref, _ = float_forward(model, xq.to_float())
    eng = result.logits.to_float()
    local = local_sign_check(model, result.trace)
    return {
        "n": len(ref),
        "argmax_agreement": float((eng.argmax(axis=1) == ref.argmax(axis=1)).mean()) if len(ref) else None,
        "logit_max_abs": float(np.abs(eng - ref).max()) if len(ref) else None,
        "sign_disagreements": local["disagreements"],
        "max_sign_distance": local["max_distance"],
        "multiplications_core": result.core.multiplications,
        "multiplications_total": result.counters.multiplications,
    }
