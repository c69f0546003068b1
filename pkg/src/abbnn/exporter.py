"""Fold a step-2 TrainState into the multiplication-free form and (de)serialize it as ABNN.

ABNN layout (little-endian)::

    "ABNN"  u32 version=1  u8 frac_bits  u8 flags=0  u16 reserved=0
    u32     layer count
    per layer: u8 type tag, u32 param-block length, param block
    u32     CRC32 (IEEE) of all preceding bytes

Param blocks by tag:

    0 input      u32 c, h, w
    1 fixedconv  u32 c_out, c_in, kh, kw, stride, pad; i32 W[c_out*c_in*kh*kw]; i32 bias[c_out]
    2 threshold  u32 c; i32 b[c]
    3 packedconv u32 c_out, c_in, kh, kw, stride, pad; i8 kappa_exp[c_out]; u64 words[c_out*nw]
    4 shiftprelu u32 c; i8 exp[c]; i32 xi1[c]; i32 xi2[c]
    5 avgpool    (empty)
    6 blockbegin (empty)
    7 blockend   i8 alpha_exp; u8 pool; u16 repeat
    8 flatten    (empty)
    9 packeddense  u32 n_out, n_in; i8 kappa_exp[n_out]; u64 words[n_out*nw]
   10 fixeddense   u32 n_out, n_in; i32 W[n_out*n_in]; i32 bias[n_out]

``nw`` is the number of 64-bit words per packed row; pad bits are zero.
Fixed-point constants are raw Q(31-F).F values; exponents are plain integers.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bitcore import INT32_MAX, INT32_MIN, n_words, pack_bits, unpack_bits
from .container import Reader, Writer, check_crc, split_crc
from .errors import ContractViolation, DegenerateRowError, ExportError, FormatError
from .graphspec import GraphSpec
from .nfgraph import (
    TrainState,
    avgpool_forward,
    conv2d,
    kappa_exponents,
    pname,
    round_half_even,
    shortcut_forward,
    sws_standardize,
)

MAGIC = b"ABNN"
VERSION = 1
MAX_SHIFT = 31


# --------------------------------------------------------------------------- layer types


@dataclass
class Input:
    TAG = 0
    c: int
    h: int
    w: int

    def out_shape(self, shape):
        return (self.c, self.h, self.w)


@dataclass
class _ConvGeometry:
    c_out: int
    c_in: int
    kh: int
    kw: int
    stride: int
    pad: int

    @property
    def fan_in(self):
        return self.c_in * self.kh * self.kw

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ContractViolation(f"conv expects {self.c_in} input channels, got {c}")
        ho = (h + 2 * self.pad - self.kh) // self.stride + 1
        wo = (w + 2 * self.pad - self.kw) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ContractViolation(f"conv output would be empty for input {shape}")
        return (self.c_out, ho, wo)


@dataclass
class FixedConv(_ConvGeometry):
    """Full-precision boundary convolution with fixed-point weights."""

    TAG = 1
    weights: np.ndarray = None  # int32 (c_out, c_in, kh, kw)
    bias: np.ndarray = None  # int32 (c_out,)


@dataclass
class Threshold:
    """Folded masked sign: +1 iff ``x >= b_c``."""

    TAG = 2
    c: int
    b: np.ndarray  # int32 (c,)

    def out_shape(self, shape):
        if shape[0] != self.c:
            raise ContractViolation(f"threshold layer has {self.c} channels, input has {shape[0]}")
        return shape


@dataclass
class PackedConv(_ConvGeometry):
    """Binary convolution: packed sign(W_hat) rows and one power-of-two exponent per channel."""

    TAG = 3
    kappa_exp: np.ndarray = None  # int8 (c_out,)
    words: np.ndarray = None  # uint64 (c_out, nw)


@dataclass
class ShiftPReLU:
    TAG = 4
    c: int
    exp: np.ndarray  # int8 (c,)
    xi1: np.ndarray  # int32 (c,)
    xi2: np.ndarray  # int32 (c,)

    def out_shape(self, shape):
        if shape[0] != self.c:
            raise ContractViolation(f"PReLU layer has {self.c} channels, input has {shape[0]}")
        return shape


@dataclass
class AvgPool:
    TAG = 5

    def out_shape(self, shape):
        c, h, w = shape
        if h % 2 or w % 2:
            raise ContractViolation(f"avgpool needs even spatial dims, got {h}x{w}")
        return (c, h // 2, w // 2)


@dataclass
class BlockBegin:
    TAG = 6

    def out_shape(self, shape):
        return shape


@dataclass
class BlockEnd:
    TAG = 7
    alpha_exp: int
    pool: bool = False
    repeat: int = 1

    def out_shape(self, shape):
        return shape


@dataclass
class Flatten:
    TAG = 8

    def out_shape(self, shape):
        return (int(np.prod(shape)), 1, 1)


@dataclass
class PackedDense:
    TAG = 9
    n_out: int
    n_in: int
    kappa_exp: np.ndarray  # int8 (n_out,)
    words: np.ndarray  # uint64 (n_out, nw)

    @property
    def fan_in(self):
        return self.n_in

    def out_shape(self, shape):
        if tuple(shape) != (self.n_in, 1, 1):
            raise ContractViolation(f"dense layer expects ({self.n_in}, 1, 1), got {shape}")
        return (self.n_out, 1, 1)


@dataclass
class FixedDense:
    TAG = 10
    n_out: int
    n_in: int
    weights: np.ndarray  # int32 (n_out, n_in)
    bias: np.ndarray  # int32 (n_out,)

    def out_shape(self, shape):
        if int(np.prod(shape)) != self.n_in:
            raise ContractViolation(f"dense layer expects {self.n_in} inputs, got {shape}")
        return (self.n_out, 1, 1)


LAYER_TYPES = {cls.TAG: cls for cls in (
    Input, FixedConv, Threshold, PackedConv, ShiftPReLU, AvgPool, BlockBegin, BlockEnd, Flatten,
    PackedDense, FixedDense,
)}
BOUNDARY_TYPES = (FixedConv, FixedDense)


@dataclass
class FoldedModel:
    """Inference artifact. ``reference`` keeps the real-valued source constants
    for the float oracle; it is never serialized and the engine never reads it."""

    frac_bits: int
    layers: list
    reference: dict = field(default_factory=dict, compare=False, repr=False)

    def shapes(self) -> list[tuple]:
        """Output shape of every layer; also checks that the topology chains."""
        if not self.layers or not isinstance(self.layers[0], Input):
            raise ContractViolation("a folded model must start with an input layer")
        shape, out, stack = None, [], []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Input) and i:
                raise ContractViolation(f"layer {i}: input layer may only appear first")
            shape = layer.out_shape(shape)
            if isinstance(layer, BlockBegin):
                stack.append(shape)
            elif isinstance(layer, BlockEnd):
                if not stack:
                    raise ContractViolation(f"layer {i}: block end without a block begin")
                entry = stack.pop()
                short = (entry[0] * layer.repeat,) + ((entry[1] // 2, entry[2] // 2) if layer.pool else entry[1:])
                if short != tuple(shape):
                    raise ContractViolation(f"layer {i}: shortcut shape {short} does not match branch {shape}")
            out.append(tuple(shape))
        if stack:
            raise ContractViolation("unclosed residual block")
        return out

    @property
    def input_shape(self):
        return self.layers[0].out_shape(None)

    def validate(self) -> None:
        if not 0 <= self.frac_bits <= 30:
            raise ContractViolation(f"frac_bits must be in [0, 30], got {self.frac_bits}")
        self.shapes()
        for i, layer in enumerate(self.layers):
            for name, value, lo, hi in _exponents(layer):
                if value.size and (value.min() < lo or value.max() > hi):
                    raise ContractViolation(f"layer {i}: {name} exponent outside [{lo}, {hi}]")
            if isinstance(layer, (PackedConv, PackedDense)):
                n = layer.fan_in
                rows = layer.c_out if isinstance(layer, PackedConv) else layer.n_out
                if layer.words.shape != (rows, n_words(n)) or layer.kappa_exp.shape != (rows,):
                    raise ContractViolation(f"layer {i}: packed weight block has inconsistent length")
                pad = n_words(n) * 64 - n
                if pad and np.any(layer.words[:, -1] >> np.uint64(64 - pad)):
                    raise ContractViolation(f"layer {i}: nonzero pad bits in packed weights")

    def to_bytes(self) -> bytes:
        return dumps(self)

    def __eq__(self, other):
        return isinstance(other, FoldedModel) and dumps(self) == dumps(other)


def _exponents(layer):
    if isinstance(layer, (PackedConv, PackedDense)):
        yield "kappa", layer.kappa_exp, -MAX_SHIFT, MAX_SHIFT
    elif isinstance(layer, ShiftPReLU):
        yield "slope", layer.exp, -MAX_SHIFT, MAX_SHIFT
    elif isinstance(layer, BlockEnd):
        yield "alpha", np.array([layer.alpha_exp]), -MAX_SHIFT, MAX_SHIFT


def no_real_multipliers(model: FoldedModel) -> list[str]:
    """Structural scan: names of any layer attribute holding a non-integer value."""
    bad = []
    for i, layer in enumerate(model.layers):
        for f in fields(layer):
            v = getattr(layer, f.name)
            if isinstance(v, (bool, int, np.integer)):
                continue
            if isinstance(v, np.ndarray) and np.issubdtype(v.dtype, np.integer):
                continue
            bad.append(f"layer {i} ({type(layer).__name__}).{f.name}")
    return bad


# --------------------------------------------------------------------------- fold


def to_fixed(x, frac_bits: int, what: str) -> np.ndarray:
    """Round to Q.F raw int32; out-of-range or non-finite values are an export error."""
    x = np.asarray(x, dtype=np.float64)
    scaled = np.rint(np.ldexp(x, frac_bits))
    bad = ~np.isfinite(scaled) | (scaled < INT32_MIN) | (scaled > INT32_MAX)
    if bad.any():
        j = int(np.flatnonzero(bad.ravel())[0])
        raise ExportError(f"{what}: value {x.ravel()[j]!r} (element {j}) is not representable at Q.{frac_bits}")
    return scaled.astype(np.int32)


def _pack_binary(W, where: str):
    try:
        W_hat = sws_standardize(W)
    except DegenerateRowError as exc:
        raise ExportError(f"{where}: channel {exc.row} has an all-zero standardized row (kappa = 0)") from exc
    k = kappa_exponents(W_hat)
    for ch, e in enumerate(k):
        if not np.isfinite(e):
            raise ExportError(f"{where}: channel {ch} has kappa = 0")
        if abs(e) > MAX_SHIFT:
            raise ExportError(f"{where}: channel {ch} kappa exponent {int(e)} outside [-31, 31]")
    rows = W_hat.reshape(len(W_hat), -1)
    return k.astype(np.int8), pack_bits(rows >= 0)


def _spot_check_threshold(xi, beta, b, rng, where: str, n: int):
    """Verify sign(x - b) == sign(x / beta + xi) on random probes around each threshold."""
    if n <= 0:
        return
    scale = np.maximum(1.0, np.abs(b))
    x = b[None, :] + scale[None, :] * rng.normal(size=(n, len(b)))
    keep = np.abs(x - b) > 1e-9 * scale
    folded = x >= b
    source = x / beta + xi >= 0
    if np.any((folded != source) & keep):
        ch = int(np.flatnonzero(((folded != source) & keep).any(axis=0))[0])
        raise ExportError(f"{where}: folded threshold disagrees with the source sign on channel {ch}")


def fold(state: TrainState, spec: GraphSpec | None = None, frac_bits: int = 16, *,
         probes: int = 64, seed: int = 0) -> FoldedModel:
    """Drop mask layers and turn every scale into an integer exponent."""
    from .checkpoint import check_compatible

    spec = state.spec if spec is None else spec
    if state.phase != "step2":
        raise ExportError(f"only step2-trained states can be folded (state phase is '{state.phase}')")
    if not 0 <= frac_bits <= 30:
        raise ExportError(f"frac_bits must be in [0, 30], got {frac_bits}")
    check_compatible(spec, state)
    rng = np.random.default_rng(seed)
    p = state.params
    F = frac_bits
    layers: list = [Input(*spec.input_shape)]
    reference: dict = {}
    for r in spec.resolve():
        i, kind, f = r.index, r.kind, r.spec.fields
        where = f"layer {i} ({kind})"
        ref = {}
        if kind == "firstconv":
            W, b = p[pname(i, "W")], p[pname(i, "b")]
            layer = FixedConv(W.shape[0], W.shape[1], W.shape[2], W.shape[3], f.get("stride", 1), f.get("pad", 0),
                              to_fixed(W, F, f"{where} weights"), to_fixed(b, F, f"{where} bias"))
            ref = {"weights": W.copy(), "bias": b.copy()}
        elif kind == "maskedsign":
            beta = state.beta_for(r)
            if not beta > 0:
                raise ExportError(f"{where}: beta must be positive, got {beta}")
            xi = p[pname(i, "xi")]
            b = -xi * beta
            _spot_check_threshold(xi, beta, b, rng, where, probes)
            layer = Threshold(len(b), to_fixed(b, F, f"{where} threshold"))
            ref = {"b": b}
        elif kind == "binconv":
            W = p[pname(i, "W")]
            k, words = _pack_binary(W, where)
            layer = PackedConv(W.shape[0], W.shape[1], W.shape[2], W.shape[3], f.get("stride", 1), f.get("pad", 0),
                               k, words)
        elif kind == "dense":
            W = p[pname(i, "W")]
            k, words = _pack_binary(W, where)
            layer = PackedDense(W.shape[0], W.shape[1], k, words)
        elif kind in ("qrprelu", "rleaky"):
            a, x1, x2 = (p[pname(i, n)] for n in ("a", "xi1", "xi2"))
            e = np.full(len(a), float(f["slope_exp"])) if kind == "rleaky" else round_half_even(a)
            if np.any(np.abs(e) > MAX_SHIFT):
                raise ExportError(f"{where}: slope exponent outside [-31, 31]")
            layer = ShiftPReLU(len(a), e.astype(np.int8), to_fixed(x1, F, f"{where} xi1"), to_fixed(x2, F, f"{where} xi2"))
            ref = {"xi1": x1.copy(), "xi2": x2.copy()}
        elif kind == "avgpool":
            layer = AvgPool()
        elif kind == "block":
            layer = BlockBegin()
        elif kind == "end":
            layer = BlockEnd(spec.block_alpha(spec.layers[r.block]), r.pool_shortcut, r.repeat)
        elif kind == "flatten":
            layer = Flatten()
        elif kind == "lastdense":
            W, b = p[pname(i, "W")], p[pname(i, "b")]
            layer = FixedDense(W.shape[0], W.shape[1], to_fixed(W, F, f"{where} weights"), to_fixed(b, F, f"{where} bias"))
            ref = {"weights": W.copy(), "bias": b.copy()}
        else:  # pragma: no cover - resolve() only yields known kinds
            raise ExportError(f"{where}: cannot fold layer kind '{kind}'")
        if ref:
            reference[len(layers)] = ref
        layers.append(layer)
    model = FoldedModel(F, layers, reference)
    model.validate()
    return model


# --------------------------------------------------------------------------- serialization


def _write_params(w: Writer, layer) -> None:
    if isinstance(layer, Input):
        w.pack("3I", layer.c, layer.h, layer.w)
    elif isinstance(layer, (FixedConv, PackedConv)):
        w.pack("6I", layer.c_out, layer.c_in, layer.kh, layer.kw, layer.stride, layer.pad)
        if isinstance(layer, FixedConv):
            w.array(layer.weights, "i4")
            w.array(layer.bias, "i4")
        else:
            w.array(layer.kappa_exp, "i1")
            w.array(layer.words, "u8")
    elif isinstance(layer, Threshold):
        w.u32(layer.c)
        w.array(layer.b, "i4")
    elif isinstance(layer, ShiftPReLU):
        w.u32(layer.c)
        w.array(layer.exp, "i1")
        w.array(layer.xi1, "i4")
        w.array(layer.xi2, "i4")
    elif isinstance(layer, BlockEnd):
        w.pack("bBH", layer.alpha_exp, int(layer.pool), layer.repeat)
    elif isinstance(layer, PackedDense):
        w.pack("2I", layer.n_out, layer.n_in)
        w.array(layer.kappa_exp, "i1")
        w.array(layer.words, "u8")
    elif isinstance(layer, FixedDense):
        w.pack("2I", layer.n_out, layer.n_in)
        w.array(layer.weights, "i4")
        w.array(layer.bias, "i4")


def _check_fixed(a: np.ndarray, what: str):
    if a.dtype.kind == "f" or (a.size and (a.min() < INT32_MIN or a.max() > INT32_MAX)):
        raise ExportError(f"{what} is not a valid int32 fixed-point array")


def dumps(model: FoldedModel) -> bytes:
    if not 0 <= model.frac_bits <= 30:
        raise ExportError(f"frac_bits must be in [0, 30], got {model.frac_bits}")
    for i, layer in enumerate(model.layers):
        for f in fields(layer):
            v = getattr(layer, f.name)
            if isinstance(v, np.ndarray) and v.dtype != np.uint64:
                _check_fixed(v, f"layer {i} {f.name}")
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.pack("BBH", model.frac_bits, 0, 0)
    w.u32(len(model.layers))
    for layer in model.layers:
        block = Writer()
        _write_params(block, layer)
        w.u8(layer.TAG)
        w.u32(len(block))
        w.raw(block.getvalue())
    return w.finish()


def write_abnn(model: FoldedModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def _read_params(r: Reader, tag: int):
    if tag == Input.TAG:
        return Input(*r.unpack("3I"))
    if tag in (FixedConv.TAG, PackedConv.TAG):
        geo = r.unpack("6I")
        c_out, c_in, kh, kw = geo[:4]
        if tag == FixedConv.TAG:
            W = r.array("i4", c_out * c_in * kh * kw).reshape(c_out, c_in, kh, kw)
            return FixedConv(*geo, W, r.array("i4", c_out))
        k = r.array("i1", c_out)
        words = r.array("u8", c_out * n_words(c_in * kh * kw)).reshape(c_out, -1)
        return PackedConv(*geo, k, words)
    if tag == Threshold.TAG:
        c = r.u32()
        return Threshold(c, r.array("i4", c))
    if tag == ShiftPReLU.TAG:
        c = r.u32()
        return ShiftPReLU(c, r.array("i1", c), r.array("i4", c), r.array("i4", c))
    if tag == AvgPool.TAG:
        return AvgPool()
    if tag == BlockBegin.TAG:
        return BlockBegin()
    if tag == BlockEnd.TAG:
        alpha, pool, repeat = r.unpack("bBH")
        if pool > 1 or repeat < 1:
            raise FormatError(f"section '{r.section}': invalid shortcut encoding")
        return BlockEnd(alpha, bool(pool), repeat)
    if tag == Flatten.TAG:
        return Flatten()
    if tag == PackedDense.TAG:
        n_out, n_in = r.unpack("2I")
        k = r.array("i1", n_out)
        return PackedDense(n_out, n_in, k, r.array("u8", n_out * n_words(n_in)).reshape(n_out, -1))
    if tag == FixedDense.TAG:
        n_out, n_in = r.unpack("2I")
        return FixedDense(n_out, n_in, r.array("i4", n_out * n_in).reshape(n_out, n_in), r.array("i4", n_out))
    raise FormatError(f"section '{r.section}': unknown layer type tag {tag}")


def loads(data: bytes) -> FoldedModel:
    body, crc = split_crc(data, 16)
    r = Reader(body)
    if r.take(4) != MAGIC:
        raise FormatError("not an ABNN model (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported ABNN version {version}")
    frac_bits, flags, _ = r.unpack("BBH")
    if flags:
        raise FormatError(f"unsupported ABNN flags {flags:#04x}")
    count = r.u32()
    layers = []
    for i in range(count):
        with r.sub(f"layer {i}"):
            tag = r.u8()
            length = r.u32()
        name = LAYER_TYPES[tag].__name__.lower() if tag in LAYER_TYPES else f"tag{tag}"
        with r.sub(f"layer {i} ({name})", length):
            layers.append(_read_params(r, tag))
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after the last layer")
    check_crc(body, crc)
    model = FoldedModel(frac_bits, layers)
    try:
        model.validate()
    except ContractViolation as exc:
        raise FormatError(f"invalid model: {exc}") from exc
    return model


def read_abnn(path) -> FoldedModel:
    return loads(Path(path).read_bytes())


# --------------------------------------------------------------------------- float oracle


def unpack_weights(layer) -> np.ndarray:
    """Packed rows back to ±1 float weights in the layer's logical shape."""
    if isinstance(layer, PackedConv):
        shape = (layer.c_out, layer.c_in, layer.kh, layer.kw)
    else:
        shape = (layer.n_out, layer.n_in, 1, 1)
    bits = unpack_bits(layer.words, int(np.prod(shape[1:])))
    return np.where(bits, 1.0, -1.0).reshape(shape)


def float_forward(model: FoldedModel, x, *, record: bool = False):
    """Execute the folded graph in float64: exponents as exact powers of two and,
    when the model still carries them, unquantized real constants.

    Returns ``(logits, signs)`` where ``signs`` maps layer position to the ±1
    output of each threshold layer (only when ``record``).
    """
    F = model.frac_bits
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ContractViolation(f"input shape {x.shape[1:]} does not match {model.input_shape}")

    def const(i, name, raw):
        ref = model.reference.get(i)
        return ref[name] if ref is not None and name in ref else np.ldexp(raw.astype(np.float64), -F)

    signs = {}
    stack = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Input):
            continue
        if isinstance(layer, FixedConv):
            y, _ = conv2d(x, const(i, "weights", layer.weights), layer.stride, layer.pad)
            x = y + const(i, "bias", layer.bias)[None, :, None, None]
        elif isinstance(layer, Threshold):
            x = np.where(x >= const(i, "b", layer.b)[None, :, None, None], 1.0, -1.0)
            if record:
                signs[i] = x
        elif isinstance(layer, (PackedConv, PackedDense)):
            stride, pad = (layer.stride, layer.pad) if isinstance(layer, PackedConv) else (1, 0)
            y, _ = conv2d(x, unpack_weights(layer), stride, pad)
            x = np.ldexp(y, layer.kappa_exp.astype(np.int64)[None, :, None, None])
        elif isinstance(layer, ShiftPReLU):
            s = np.ldexp(1.0, layer.exp.astype(np.int64))[None, :, None, None]
            x1 = const(i, "xi1", layer.xi1)[None, :, None, None]
            x2 = const(i, "xi2", layer.xi2)[None, :, None, None]
            x = np.where(x >= 0, x, s * (x + x1) + x2)
        elif isinstance(layer, AvgPool):
            x = avgpool_forward(x)
        elif isinstance(layer, BlockBegin):
            stack.append(x)
        elif isinstance(layer, BlockEnd):
            x = shortcut_forward(stack.pop(), layer.pool, layer.repeat) + np.ldexp(x, layer.alpha_exp)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1, 1, 1)
        elif isinstance(layer, FixedDense):
            x = x.reshape(x.shape[0], -1) @ const(i, "weights", layer.weights).T + const(i, "bias", layer.bias)
    return x, signs
