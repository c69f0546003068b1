"""GraphSpec: a line-oriented, declarative network description.

Grammar (one statement per line, ``#`` starts a comment)::

    input c=<int> h=<int> w=<int>           # exactly once, first statement
    option alpha_exp=<int> delta=<real>     # optional network defaults
    firstconv c_out=.. k=.. stride=.. pad=.. fp=1
    block [alpha_exp=<int>]                 # opens a residual block
    maskedsign [channels=..]
    binconv c_out=.. k=.. [stride=1] [pad=0]
    qrprelu [channels=..]
    rleaky slope_exp=<int> [channels=..]
    avgpool
    end                                     # closes the block
    flatten
    dense n_out=..
    lastdense n_out=.. fp=1

``k`` is shorthand for ``kh=k kw=k``. Input-side fields (``c_in``,
``channels``, ``n_in``) may be omitted and are derived from the incoming
shape; when given they are checked. A block computes
``x + 2**alpha_exp * branch(x)``; when the branch halves the spatial size
and/or multiplies the channel count, the shortcut is a 2x2 average pool
and/or channel repetition.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import SpecError

Shape = tuple[int, int, int]

FIELDS: dict[str, tuple[str, ...]] = {
    "firstconv": ("c_in", "c_out", "kh", "kw", "stride", "pad", "fp"),
    "block": ("alpha_exp",),
    "end": ("alpha_exp",),
    "maskedsign": ("channels",),
    "binconv": ("c_in", "c_out", "kh", "kw", "stride", "pad"),
    "qrprelu": ("channels",),
    "rleaky": ("channels", "slope_exp"),
    "avgpool": (),
    "flatten": (),
    "dense": ("n_in", "n_out"),
    "lastdense": ("n_in", "n_out", "fp"),
}
REQUIRED: dict[str, tuple[str, ...]] = {
    "firstconv": ("c_out", "kh", "kw"),
    "binconv": ("c_out", "kh", "kw"),
    "rleaky": ("slope_exp",),
    "dense": ("n_out",),
    "lastdense": ("n_out",),
}
BOUNDARY = frozenset({"firstconv", "lastdense"})
ACTIVATIONS = frozenset({"qrprelu", "rleaky"})


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fields: dict = field(default_factory=dict)
    line: int | None = None

    def get(self, key, default=None):
        return self.fields.get(key, default)

    def __eq__(self, other):
        return isinstance(other, LayerSpec) and (self.kind, self.fields) == (other.kind, other.fields)

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.fields.items()))))


@dataclass(frozen=True)
class ResolvedLayer:
    index: int
    spec: LayerSpec
    in_shape: Shape
    out_shape: Shape
    block: int | None = None  # index of the enclosing ``block`` statement
    # only set on ``end``
    entry_shape: Shape | None = None
    pool_shortcut: bool = False
    repeat: int = 1

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def downsample(self) -> bool:
        return self.pool_shortcut or self.repeat > 1


@dataclass
class GraphSpec:
    input_shape: Shape
    layers: list[LayerSpec]
    alpha_exp: int = -2
    delta: float = 3.0

    # ------------------------------------------------------------------ text
    @classmethod
    def parse(cls, text: str) -> "GraphSpec":
        input_shape = None
        options = {}
        layers: list[LayerSpec] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            kv = _parse_fields(rest, lineno)
            if head == "input":
                if input_shape is not None:
                    raise SpecError("duplicate 'input' statement", lineno)
                if layers:
                    raise SpecError("'input' must precede all layers", lineno)
                try:
                    input_shape = (int(kv.pop("c")), int(kv.pop("h")), int(kv.pop("w")))
                except KeyError as exc:
                    raise SpecError(f"'input' is missing field {exc.args[0]}", lineno) from None
                if kv:
                    raise SpecError(f"unknown input field(s) {sorted(kv)}", lineno)
            elif head == "option":
                for key, val in kv.items():
                    if key not in ("alpha_exp", "delta"):
                        raise SpecError(f"unknown option '{key}'", lineno)
                    options[key] = val
            elif head in FIELDS:
                if "k" in kv:
                    k = kv.pop("k")
                    kv.setdefault("kh", k)
                    kv.setdefault("kw", k)
                unknown = set(kv) - set(FIELDS[head])
                if unknown:
                    raise SpecError(f"unknown field(s) {sorted(unknown)} for '{head}'", lineno)
                for key, val in kv.items():
                    if not isinstance(val, int):
                        raise SpecError(f"field '{key}' must be an integer, got {val!r}", lineno)
                missing = [f for f in REQUIRED.get(head, ()) if f not in kv]
                if missing:
                    raise SpecError(f"'{head}' is missing field(s) {missing}", lineno)
                layers.append(LayerSpec(head, kv, lineno))
            else:
                raise SpecError(f"unknown statement '{head}'", lineno)
        if input_shape is None:
            raise SpecError("missing 'input' statement")
        alpha = options.get("alpha_exp", -2)
        if not isinstance(alpha, int):
            raise SpecError(f"alpha_exp must be an integer, got {alpha!r}")
        spec = cls(input_shape, layers, alpha, float(options.get("delta", 3.0)))
        spec.resolve()
        return spec

    @classmethod
    def load(cls, path) -> "GraphSpec":
        return cls.parse(Path(path).read_text())

    def to_text(self) -> str:
        c, h, w = self.input_shape
        lines = [f"input c={c} h={h} w={w}", f"option alpha_exp={self.alpha_exp} delta={_fmt(self.delta)}"]
        depth = 0
        for layer in self.layers:
            if layer.kind == "end":
                depth -= 1
            body = " ".join(f"{k}={layer.fields[k]}" for k in FIELDS[layer.kind] if k in layer.fields)
            lines.append("  " * depth + (f"{layer.kind} {body}" if body else layer.kind))
            if layer.kind == "block":
                depth += 1
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        if not isinstance(other, GraphSpec):
            return NotImplemented
        return (
            tuple(self.input_shape) == tuple(other.input_shape)
            and self.layers == other.layers
            and self.alpha_exp == other.alpha_exp
            and self.delta == other.delta
        )

    # ------------------------------------------------------------------ shapes
    def block_alpha(self, layer: LayerSpec) -> int:
        return layer.get("alpha_exp", self.alpha_exp)

    def resolve(self, hw: tuple[int, int] | int | None = None) -> list[ResolvedLayer]:
        """Propagate shapes through the graph, validating every statement."""
        c, h, w = self.input_shape
        if hw is not None:
            h, w = (hw, hw) if isinstance(hw, int) else hw
        if min(c, h, w) <= 0:
            raise SpecError(f"input shape must be positive, got {(c, h, w)}")
        shape: Shape = (c, h, w)
        out: list[ResolvedLayer] = []
        open_block: int | None = None
        entry: Shape | None = None
        prev_kind = None
        for i, layer in enumerate(self.layers):
            kind, f, ln = layer.kind, layer.fields, layer.line
            c, h, w = shape
            extra = {}
            if kind in ("firstconv", "binconv"):
                if kind == "binconv" and prev_kind != "maskedsign":
                    raise SpecError("binconv must directly follow a maskedsign layer", ln)
                _check(f, "c_in", c, ln)
                stride, pad = f.get("stride", 1), f.get("pad", 0)
                kh, kw = f["kh"], f["kw"]
                if stride < 1 or pad < 0 or kh < 1 or kw < 1:
                    raise SpecError("kernel, stride must be >= 1 and pad >= 0", ln)
                ho = (h + 2 * pad - kh) // stride + 1
                wo = (w + 2 * pad - kw) // stride + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"convolution output would be empty for input {shape}", ln)
                new = (f["c_out"], ho, wo)
            elif kind in ("maskedsign", "qrprelu", "rleaky"):
                _check(f, "channels", c, ln)
                new = shape
            elif kind == "avgpool":
                if h % 2 or w % 2:
                    raise SpecError(f"avgpool needs even spatial dims, got {h}x{w}", ln)
                new = (c, h // 2, w // 2)
            elif kind == "flatten":
                new = (c * h * w, 1, 1)
            elif kind in ("dense", "lastdense"):
                if h != 1 or w != 1:
                    raise SpecError(f"'{kind}' needs a flattened input, got {shape}", ln)
                if kind == "dense" and prev_kind != "maskedsign":
                    raise SpecError("dense must directly follow a maskedsign layer", ln)
                _check(f, "n_in", c, ln)
                new = (f["n_out"], 1, 1)
            elif kind == "block":
                if open_block is not None:
                    raise SpecError("nested blocks are not supported", ln)
                open_block, entry = i, shape
                new = shape
            elif kind == "end":
                if open_block is None:
                    raise SpecError("'end' without matching 'block'", ln)
                alpha = self.block_alpha(self.layers[open_block])
                if "alpha_exp" in f and f["alpha_exp"] != alpha:
                    raise SpecError("'end' alpha_exp differs from its 'block'", ln)
                ec, eh, ew = entry
                if (h, w) == (eh, ew):
                    pool = False
                elif eh % 2 == 0 and ew % 2 == 0 and (h, w) == (eh // 2, ew // 2):
                    pool = True
                else:
                    raise SpecError(f"branch output {shape} is incompatible with block input {entry}", ln)
                if c % ec:
                    raise SpecError(f"branch channels {c} are not a multiple of block input channels {ec}", ln)
                extra = dict(entry_shape=entry, pool_shortcut=pool, repeat=c // ec)
                new = shape
            else:  # pragma: no cover - parse() rejects unknown kinds
                raise SpecError(f"unknown layer kind '{kind}'", ln)
            if kind in BOUNDARY and f.get("fp", 1) != 1:
                raise SpecError(f"'{kind}' must be full precision (fp=1)", ln)
            block = open_block if kind != "block" else i
            out.append(ResolvedLayer(i, layer, shape, new, block, **extra))
            if kind == "end":
                open_block, entry = None, None
            shape = new
            prev_kind = kind
        if open_block is not None:
            raise SpecError("unterminated block", self.layers[open_block].line)
        return out

    def output_shape(self, hw=None) -> Shape:
        resolved = self.resolve(hw)
        return resolved[-1].out_shape if resolved else tuple(self.input_shape)

    def validate_trainable(self) -> None:
        """Extra rules for networks the trainer can build."""
        if not self.layers or self.layers[0].kind != "firstconv":
            raise SpecError("a trainable network must start with a full-precision 'firstconv'")
        if self.layers[-1].kind != "lastdense":
            raise SpecError("a trainable network must end with a full-precision 'lastdense'")
        for layer in self.layers[1:-1]:
            if layer.kind in BOUNDARY:
                raise SpecError(f"'{layer.kind}' is only allowed at the network boundary", layer.line)

    def blocks(self) -> list[tuple[int, int]]:
        pairs, start = [], None
        for i, layer in enumerate(self.layers):
            if layer.kind == "block":
                start = i
            elif layer.kind == "end":
                pairs.append((start, i))
        return pairs

    def with_activation(self, mode: str | None) -> "GraphSpec":
        """Rewrite every PReLU-style layer to ``mode`` ('quantized' or 'rleaky:<exp>')."""
        if mode is None:
            return self
        kind, slope = parse_activation(mode)
        layers = []
        for layer in self.layers:
            if layer.kind in ACTIVATIONS:
                f = {k: v for k, v in layer.fields.items() if k == "channels"}
                if kind == "rleaky":
                    f["slope_exp"] = slope
                layer = LayerSpec(kind, f, layer.line)
            layers.append(layer)
        return GraphSpec(tuple(self.input_shape), layers, self.alpha_exp, self.delta)

    def concat(self, other: "GraphSpec") -> "GraphSpec":
        if tuple(other.input_shape) != self.output_shape():
            raise SpecError(f"cannot append graph with input {other.input_shape} to output {self.output_shape()}")
        out = GraphSpec(tuple(self.input_shape), list(self.layers) + list(other.layers), self.alpha_exp, self.delta)
        out.resolve()
        return out


def parse_activation(mode: str) -> tuple[str, int | None]:
    mode = mode.strip().lower()
    if mode in ("quantized", "qrprelu"):
        return "qrprelu", None
    if mode.startswith("rleaky"):
        _, _, exp = mode.partition(":")
        try:
            return "rleaky", int(exp)
        except ValueError:
            raise SpecError(f"activation '{mode}' needs an integer slope exponent, e.g. rleaky:-3") from None
    raise SpecError(f"unknown activation mode '{mode}' (expected 'quantized' or 'rleaky:<exp>')")


def bundled_spec_path(name: str) -> Path:
    return Path(str(resources.files("abbnn") / "specs" / name))


def find_spec(name_or_path) -> Path:
    """Resolve a spec argument: an existing path, else a bundled spec name."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = bundled_spec_path(p.name)
    if bundled.exists():
        return bundled
    if not p.suffix:
        bundled = bundled_spec_path(p.name + ".spec")
        if bundled.exists():
            return bundled
    raise FileNotFoundError(str(name_or_path))


def load_spec(name_or_path) -> GraphSpec:
    return GraphSpec.load(find_spec(name_or_path))


def _parse_fields(tokens, lineno):
    out = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep or not key or not val:
            raise SpecError(f"expected key=value, got '{tok}'", lineno)
        if key in out:
            raise SpecError(f"duplicate field '{key}'", lineno)
        try:
            out[key] = int(val)
        except ValueError:
            try:
                out[key] = float(val)
            except ValueError:
                raise SpecError(f"field '{key}' has non-numeric value '{val}'", lineno) from None
    return out


def _check(fields, key, actual, line):
    if key in fields and fields[key] != actual:
        raise SpecError(f"{key}={fields[key]} does not match incoming size {actual}", line)


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))
