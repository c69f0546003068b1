"""Compare the numba and numpy kernel backends.

Times the XNOR-popcount and shift-add products on a few layer-like shapes,
then a full engine pass on the bundled toy network with each backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 256]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from abbnn import kernels
from abbnn.bitcore import FixedTensor, n_words
from abbnn.engine import infer
from abbnn.exporter import fold
from abbnn.graphspec import load_spec
from abbnn.nfgraph import init_state

SHAPES = [  # (patches, out channels, fan-in)
    (4096, 64, 576),
    (1024, 128, 1152),
    (256, 256, 2304),
]


def best_of(fn, repeat):
    fn()  # warm-up (includes numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_xnor(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for P, O, n in SHAPES:
        nw = n_words(n)
        a = rng.integers(0, 2**63, size=(P, nw), dtype=np.uint64)
        w = rng.integers(0, 2**63, size=(O, nw), dtype=np.uint64)
        valid = np.full((P, nw), np.uint64(2**64 - 1))
        n_valid = np.full(P, nw * 64)
        ref = None
        for name, impl in kernels.IMPLEMENTATIONS.items():
            f = impl["xnor_popcount_matmul"]
            out = f(a, valid, w, n_valid)
            ref = out if ref is None else ref
            assert np.array_equal(out, ref)
            rows.append(("xnor_popcount_matmul", f"{P}x{O}x{n}", name, best_of(lambda: f(a, valid, w, n_valid), repeat)))
    return rows


def bench_shift_add(repeat):
    rng = np.random.default_rng(1)
    rows = []
    for P, O, n in [(2048, 16, 27), (256, 10, 512)]:
        x = rng.integers(-(2**20), 2**20, size=(P, n))
        w = rng.integers(-(2**15), 2**15, size=(O, n))
        for name, impl in kernels.IMPLEMENTATIONS.items():
            f = impl["shift_add_matmul"]
            assert np.array_equal(f(x, w), x @ w.T)
            rows.append(("shift_add_matmul", f"{P}x{O}x{n}", name, best_of(lambda: f(x, w), repeat)))
    return rows


def bench_engine(repeat, batch):
    spec = load_spec("toy2block")
    state = init_state(spec)
    state.phase = "step2"
    model = fold(state)
    x = FixedTensor.from_float(np.random.default_rng(2).normal(size=(batch,) + tuple(spec.input_shape)))
    rows = []
    saved = {k: getattr(kernels, k) for k in ("xnor_popcount_matmul", "shift_add_matmul")}
    try:
        for name, impl in kernels.IMPLEMENTATIONS.items():
            for k in saved:
                setattr(kernels, k, impl[k])
            for strict in (False, True):
                label = f"toy2block b={batch}" + (" strict" if strict else "")
                rows.append(("engine.infer", label, name, best_of(lambda: infer(model, x, strict), repeat)))
    finally:
        for k, f in saved.items():
            setattr(kernels, k, f)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=256)
    args = ap.parse_args(argv)
    if len(kernels.IMPLEMENTATIONS) < 2:
        print("numba is not installed; only the numpy backend is timed")
    rows = bench_xnor(args.repeat) + bench_shift_add(args.repeat) + bench_engine(args.repeat, args.batch)
    print(f"{'kernel':<22}{'shape':<26}{'backend':<9}{'best (ms)':>10}")
    for kernel, shape, backend, t in rows:
        print(f"{kernel:<22}{shape:<26}{backend:<9}{t * 1e3:>10.2f}")


if __name__ == "__main__":
    main()
