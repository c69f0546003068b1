"""Static multiplication-operand (MO) accounting for BN-Free and A&B graphs.

Sites counted for a BN-Free network (boundary layers excluded):

* beta   - the ``x / beta`` scaling at every block entry, c*h*w of the block input
* alpha  - the ``alpha * f`` scaling at every block exit, c*h*w of the branch output
* prelu  - every PReLU-style activation, c*h*w of its input
* avgpool - every 2x2 average pool (the pooled shortcut of a downsampling block
  and any explicit pool layer), c_out*h_out*w_out of the pooled tensor

In the A&B form alpha, PReLU slopes and pools are shifts and beta is folded
into the sign thresholds, so every site contributes 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AuditError, ContractViolation, SpecError
from .graphspec import BOUNDARY, GraphSpec

# technique -> (symbols, formula text)
FORMULAS = {
    "act_scale": (("c", "h", "w"), "(c+1)*h*w"),
    "bn": (("c", "h", "w"), "c*h*w"),
    "prelu": (("c", "h", "w"), "c*h*w"),
    "real_residual": (("c_in", "c_out", "h_out", "w_out", "k_h", "k_w"), "c_in*c_out*h_out*w_out*k_h*k_w"),
    "avgpool": (("c_out", "h_out", "w_out"), "c_out*h_out*w_out"),
    "alpha": (("c", "h", "w"), "c*h*w"),
    "beta": (("c", "h", "w"), "c*h*w"),
}
SITE_TECHNIQUES = ("beta", "alpha", "prelu", "avgpool")
AB_CLASS = {"beta": "folded", "alpha": "shift", "prelu": "shift", "avgpool": "shift"}
VARIANTS = ("bnfree", "ab")


def mo_formula(technique: str, **dims) -> int:
    """Multiplication operands a technique introduces at one site."""
    if technique not in FORMULAS:
        raise AuditError(f"unknown technique '{technique}' (known: {', '.join(FORMULAS)})")
    symbols, _ = FORMULAS[technique]
    missing = [s for s in symbols if s not in dims]
    if missing:
        raise AuditError(f"technique '{technique}' needs dims {', '.join(missing)}")
    v = {s: int(dims[s]) for s in symbols}
    if any(x < 0 for x in v.values()):
        raise AuditError(f"negative dimension in {v}")
    if technique == "act_scale":
        return (v["c"] + 1) * v["h"] * v["w"]
    out = 1
    for s in symbols:
        out *= v[s]
    return out


@dataclass
class MOEntry:
    layer: int
    technique: str
    formula: str
    dims: dict
    count: int
    handling: str  # "multiply", "shift" or "folded"


@dataclass
class MOReport:
    variant: str
    input_hw: tuple
    entries: list[MOEntry] = field(default_factory=list)

    @property
    def totals(self) -> dict[str, int]:
        out = {t: 0 for t in SITE_TECHNIQUES}
        for e in self.entries:
            out[e.technique] = out.get(e.technique, 0) + e.count
        return out

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    def ratios(self) -> dict[str, float]:
        total = self.total
        return {t: (c / total if total else 0.0) for t, c in self.totals.items()}

    def table(self) -> str:
        lines = [f"MO audit ({self.variant}, input {self.input_hw[0]}x{self.input_hw[1]})",
                 f"{'layer':>6}  {'technique':<9} {'handling':<9} {'formula':<40} {'MO':>12}"]
        for e in self.entries:
            lines.append(f"{e.layer:>6}  {e.technique:<9} {e.handling:<9} {e.formula:<40} {e.count:>12,}")
        lines.append("")
        for t, c in self.totals.items():
            lines.append(f"{'total ' + t:<26}{c:>14,}  ({self.ratios()[t]:.1%})")
        lines.append(f"{'grand total':<26}{self.total:>14,}")
        return "\n".join(lines)

    def records(self) -> list[dict]:
        out = [dict(asdict(e), record="entry", variant=self.variant) for e in self.entries]
        out.append({"record": "total", "variant": self.variant, "input_hw": list(self.input_hw),
                    "totals": self.totals, "ratios": self.ratios(), "total": self.total})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def _site_dims(technique, shape, entry_shape=None):
    c, h, w = shape
    if technique == "avgpool":
        c_out = entry_shape[0] if entry_shape is not None else c
        return {"c_out": c_out, "h_out": h, "w_out": w}
    return {"c": c, "h": h, "w": w}


def iter_sites(spec: GraphSpec, input_hw=None):
    """Yield ``(layer index, technique, dims)`` for every BN-Free multiplication site."""
    try:
        resolved = spec.resolve(input_hw)
    except (SpecError, ContractViolation) as exc:
        raise AuditError(f"cannot resolve shapes: {exc}") from exc
    for r in resolved:
        if r.kind in BOUNDARY:
            continue
        if r.kind == "block":
            yield r.index, "beta", _site_dims("beta", r.in_shape)
        elif r.kind in ("qrprelu", "rleaky"):
            yield r.index, "prelu", _site_dims("prelu", r.in_shape)
        elif r.kind == "avgpool":
            yield r.index, "avgpool", _site_dims("avgpool", r.out_shape)
        elif r.kind == "end":
            if r.pool_shortcut:
                # pooled before the channel repeat, so c_out is the block input's channels
                yield r.index, "avgpool", _site_dims("avgpool", r.out_shape, r.entry_shape)
            yield r.index, "alpha", _site_dims("alpha", r.out_shape)


def audit_graph(spec: GraphSpec, variant: str = "bnfree", input_hw=None) -> MOReport:
    if variant not in VARIANTS:
        raise AuditError(f"variant must be one of {VARIANTS}, got '{variant}'")
    hw = tuple(spec.input_shape[1:]) if input_hw is None else (
        (int(input_hw), int(input_hw)) if np.isscalar(input_hw) else tuple(int(v) for v in input_hw))
    report = MOReport(variant, hw)
    for index, technique, dims in iter_sites(spec, hw):
        symbols, text = FORMULAS[technique]
        inst = text
        for s in sorted(symbols, key=len, reverse=True):
            inst = inst.replace(s, str(dims[s]))
        count = mo_formula(technique, **dims)
        if variant == "ab":
            report.entries.append(MOEntry(index, technique, f"{text} -> {AB_CLASS[technique]}", dims, 0,
                                          AB_CLASS[technique]))
        else:
            report.entries.append(MOEntry(index, technique, f"{text} = {inst}", dims, count, "multiply"))
    return report


# --------------------------------------------------------------------------- dynamic reference


def bnfree_reference_forward(spec: GraphSpec, state, x):
    """Float BN-Free executor that performs (and counts) a real multiplication at
    every beta, alpha, PReLU and average-pool site.

    Binary convolutions use the step-2 binarized weights. Returns
    ``(logits, counts)`` with counts per technique, per sample.
    """
    from .nfgraph import binconv_forward, conv2d, pname, round_half_even

    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    n = x.shape[0]
    counts = {t: 0 for t in SITE_TECHNIQUES}
    p = state.params
    stack = []

    def mul(a, b, technique):
        out = a * b
        counts[technique] += out.size
        return out

    def pool(a):
        s = a[..., ::2, ::2] + a[..., ::2, 1::2] + a[..., 1::2, ::2] + a[..., 1::2, 1::2]
        return mul(s, 0.25, "avgpool")

    for r in spec.resolve():
        i, kind, f = r.index, r.kind, r.spec.fields
        if kind == "firstconv":
            y, _ = conv2d(x, p[pname(i, "W")], f.get("stride", 1), f.get("pad", 0))
            x = y + p[pname(i, "b")][None, :, None, None]
        elif kind == "block":
            stack.append(x)
            x = mul(x, 1.0 / state.betas[i], "beta")
        elif kind == "maskedsign":
            x = np.where(x + p[pname(i, "xi")][None, :, None, None] >= 0, 1.0, -1.0)
        elif kind == "binconv":
            x, _ = binconv_forward(x, p[pname(i, "W")], f, "step2")
        elif kind == "dense":
            W = p[pname(i, "W")]
            x, _ = binconv_forward(x, W.reshape(W.shape + (1, 1)), {}, "step2")
        elif kind in ("qrprelu", "rleaky"):
            e = float(f["slope_exp"]) if kind == "rleaky" else round_half_even(p[pname(i, "a")])
            slope = np.broadcast_to(np.exp2(e), (x.shape[1],))[None, :, None, None]
            x1 = p[pname(i, "xi1")][None, :, None, None]
            x2 = p[pname(i, "xi2")][None, :, None, None]
            x = np.where(x >= 0, x, mul(slope, x + x1, "prelu") + x2)
        elif kind == "avgpool":
            x = pool(x)
        elif kind == "end":
            entry = stack.pop()
            if r.pool_shortcut:
                entry = pool(entry)
            if r.repeat > 1:
                entry = np.concatenate([entry] * r.repeat, axis=1)
            x = entry + mul(2.0 ** spec.block_alpha(spec.layers[r.block]), x, "alpha")
        elif kind == "flatten":
            x = x.reshape(n, -1, 1, 1)
        elif kind == "lastdense":
            x = x.reshape(n, -1) @ p[pname(i, "W")].T + p[pname(i, "b")]
    return x, {t: c // n for t, c in counts.items()}
