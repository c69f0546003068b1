"""ABCK checkpoint container for :class:`~abbnn.nfgraph.TrainState`.

Layout (little-endian)::

    "ABCK"  u32 version=1  u8 flags=0  u8 reserved  u16 reserved
    text    metadata (key=value lines: phase, step)
    text    GraphSpec text
    u32     block count, then per block: u32 layer index, f64 beta
    u32     array count, then per array:
            u16 name length, name, u8 dtype code (1 = f64), u8 ndim, ndim x u32, data
    u32     CRC32 of all preceding bytes

Text fields are a u32 byte length followed by UTF-8.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .container import Reader, Writer, check_crc, split_crc
from .errors import CheckpointMismatch, FormatError
from .graphspec import FIELDS, GraphSpec
from .nfgraph import TrainState

MAGIC = b"ABCK"
VERSION = 1
_F64 = 1


def dumps(state: TrainState) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.pack("BBH", 0, 0, 0)
    w.text(f"phase={state.phase}\nstep={state.step}\n")
    w.text(state.spec.to_text())
    w.u32(len(state.betas))
    for idx in sorted(state.betas):
        w.pack("Id", idx, state.betas[idx])
    arrays = []
    for prefix, group in (("param", state.params), ("m", state.m), ("v", state.v)):
        arrays += [(f"{prefix}/{k}", group[k]) for k in sorted(group)]
    w.u32(len(arrays))
    for name, a in arrays:
        nb = name.encode()
        w.u16(len(nb))
        w.raw(nb)
        w.pack("BB", _F64, a.ndim)
        w.pack(f"{a.ndim}I", *a.shape)
        w.array(a, "f8")
    return w.finish()


def save(state: TrainState, path) -> None:
    Path(path).write_bytes(dumps(state))


def loads(data: bytes) -> TrainState:
    body, crc = split_crc(data, 12)
    r = Reader(body)
    if r.take(4) != MAGIC:
        raise FormatError("not an ABCK checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    r.unpack("BBH")
    with r.sub("metadata"):
        meta = dict(line.split("=", 1) for line in r.text().splitlines() if line)
    with r.sub("spec"):
        spec = GraphSpec.parse(r.text())
    with r.sub("betas"):
        betas = {}
        for _ in range(r.u32()):
            idx, beta = r.unpack("Id")
            betas[idx] = beta
    groups = {"param": {}, "m": {}, "v": {}}
    with r.sub("arrays"):
        for _ in range(r.u32()):
            name = r.take(r.u16()).decode()
            code, ndim = r.unpack("BB")
            if code != _F64:
                raise FormatError(f"array '{name}' has unsupported dtype code {code}")
            shape = r.unpack(f"{ndim}I")
            prefix, _, key = name.partition("/")
            if prefix not in groups:
                raise FormatError(f"unknown array group in '{name}'")
            groups[prefix][key] = r.array("f8", int(np.prod(shape, dtype=np.int64))).reshape(shape)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after checkpoint body")
    check_crc(body, crc)
    if set(groups["m"]) != set(groups["param"]) or set(groups["v"]) != set(groups["param"]):
        raise FormatError("optimizer moments do not cover the parameter set")
    state = TrainState(spec, groups["param"], betas, meta.get("phase", "init"), int(meta.get("step", 0)),
                       groups["m"], groups["v"])
    return state


def load(path) -> TrainState:
    return loads(Path(path).read_bytes())


def check_compatible(spec: GraphSpec, state: TrainState) -> None:
    """Compare two graphs layer by layer, field by field."""
    a, b = spec.resolve(), state.spec.resolve()
    if tuple(spec.input_shape) != tuple(state.spec.input_shape):
        raise CheckpointMismatch(f"input shape {state.spec.input_shape} in checkpoint, {spec.input_shape} in spec")
    if len(a) != len(b):
        raise CheckpointMismatch(f"checkpoint has {len(b)} layers, spec has {len(a)}")
    for ra, rb in zip(a, b):
        if ra.kind != rb.kind:
            raise CheckpointMismatch(f"layer {ra.index}: kind '{rb.kind}' in checkpoint, '{ra.kind}' in spec")
        for key in FIELDS[ra.kind]:
            va, vb = ra.spec.get(key), rb.spec.get(key)
            if va is not None and vb is not None and va != vb:
                raise CheckpointMismatch(f"layer {ra.index} ({ra.kind}): {key}={vb} in checkpoint, {va} in spec")
        if ra.out_shape != rb.out_shape:
            raise CheckpointMismatch(
                f"layer {ra.index} ({ra.kind}): output shape {rb.out_shape} in checkpoint, {ra.out_shape} in spec"
            )
