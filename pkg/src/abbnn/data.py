"""Dataset ingestion: IDX files, the seeded synthetic benchmark, flat fixed-point inputs."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitcore import FixedTensor
from .errors import DataError, FormatError

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("=") if dt.itemsize > 1 else dt: code for code, dt in IDX_TYPES.items()}

SPLIT_FILES = {
    "train": ("train-images.idx", "train-labels.idx"),
    "test": ("test-images.idx", "test-labels.idx"),
}
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def write_idx(path, array) -> None:
    a = np.asarray(array)
    code = _IDX_CODES.get(a.dtype.newbyteorder("=") if a.dtype.itemsize > 1 else a.dtype)
    if code is None:
        raise FormatError(f"IDX cannot store dtype {a.dtype}")
    if a.ndim == 0 or a.ndim > 255:
        raise FormatError("IDX needs 1..255 dimensions")
    header = struct.pack(">BBBB", 0, 0, code, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(a, dtype=IDX_TYPES[code]).tobytes())


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise FormatError(f"{path}: not an IDX file")
    code, ndim = data[2], data[3]
    if code not in IDX_TYPES:
        raise FormatError(f"{path}: unknown IDX type code {code:#04x}")
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    dt = IDX_TYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    body = data[4 + 4 * ndim :]
    if len(body) != count * dt.itemsize:
        raise FormatError(f"{path}: expected {count * dt.itemsize} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    prototypes: np.ndarray | None = None

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])

    @property
    def n_classes(self):
        labels = np.concatenate([self.y_train, self.y_test])
        return int(labels.max()) + 1 if labels.size else 0


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable circular Gaussian blur over the last two axes."""
    radius = int(np.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1)
    kern = np.exp(-0.5 * (t / sigma) ** 2)
    kern /= kern.sum()
    out = field
    for axis in (-2, -1):
        out = sum(kern[i] * np.roll(out, t[i], axis=axis) for i in range(len(t)))
    return out


def make_synthetic(
    n_train: int = 2000,
    n_test: int = 400,
    classes: int = 2,
    channels: int = 1,
    size: int = 16,
    separation: float = 3.0,
    seed: int = 2023,
    smoothness: float = 2.0,
) -> Dataset:
    """Gaussian-prototype image classification set.

    Each class has a smooth prototype image; samples are prototype plus unit
    white noise. Prototypes are mutually orthogonal with pairwise distance
    ``2 * separation``, so the nearest-prototype rule misclassifies a
    two-class sample with probability ``Phi(-separation)``.
    """
    rng = np.random.default_rng(seed)
    D = channels * size * size
    if classes > D:
        raise DataError(f"cannot build {classes} orthogonal prototypes in {D} dimensions")
    fields = _smooth(rng.normal(size=(classes, channels, size, size)), smoothness).reshape(classes, D)
    q, _ = np.linalg.qr(fields.T)
    protos = (np.sqrt(2.0) * separation * q.T).reshape(classes, channels, size, size)

    def draw(n):
        y = rng.integers(0, classes, n)
        x = protos[y] + rng.normal(size=(n, channels, size, size))
        return x.astype(np.float32), y.astype(np.uint8)

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return Dataset(x_train, y_train, x_test, y_test, protos)


def nearest_prototype_accuracy(ds: Dataset, split: str = "test") -> float:
    """Accuracy of the linear (nearest-prototype) Bayes classifier; dataset sanity oracle."""
    x, y = (ds.x_test, ds.y_test) if split == "test" else (ds.x_train, ds.y_train)
    if len(y) == 0:
        return float("nan")
    P = ds.prototypes.reshape(len(ds.prototypes), -1)
    X = x.reshape(len(x), -1).astype(np.float64)
    scores = X @ P.T - 0.5 * (P * P).sum(axis=1)
    return float((scores.argmax(axis=1) == y).mean())


def save_dataset(ds: Dataset, out_dir) -> dict[str, str]:
    """Write the four IDX files; returns ``{filename: sha256}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sums = {}
    for split, (xs, ys) in (("train", (ds.x_train, ds.y_train)), ("test", (ds.x_test, ds.y_test))):
        xi, yi = SPLIT_FILES[split]
        write_idx(out / xi, xs.astype(np.float32))
        write_idx(out / yi, ys.astype(np.uint8))
        for name in (xi, yi):
            sums[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()
    return sums


def _as_images(a: np.ndarray) -> np.ndarray:
    if a.dtype == np.uint8:
        a = a.astype(np.float32) / 255.0
    a = a.astype(np.float32)
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4:
        raise DataError(f"image array must be (n, h, w) or (n, c, h, w), got shape {a.shape}")
    return a


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"dataset directory not found: {d}")
    for names in (SPLIT_FILES, MNIST_FILES):
        paths = {s: (d / names[s][0], d / names[s][1]) for s in ("train", "test")}
        if all(p.exists() for pair in paths.values() for p in pair):
            break
    else:
        raise DataError(f"{d}: expected {SPLIT_FILES['train'] + SPLIT_FILES['test']} or the MNIST file names")
    try:
        arrays = {s: (_as_images(read_idx(px)), read_idx(py).astype(np.int64)) for s, (px, py) in paths.items()}
    except FormatError as exc:
        raise DataError(str(exc)) from exc
    for s, (x, y) in arrays.items():
        if len(x) != len(y):
            raise DataError(f"{s}: {len(x)} images but {len(y)} labels")
    return Dataset(arrays["train"][0], arrays["train"][1], arrays["test"][0], arrays["test"][1])


# --------------------------------------------------------------------------- flat fixed-point input
#
# magic "ABFX", u8 frac_bits, u8 ndim, u16 reserved (0), ndim x u32 dims,
# then prod(dims) little-endian i32 raw values.


def write_fixed(path, x: FixedTensor) -> None:
    v = np.asarray(x.values)
    header = b"ABFX" + struct.pack("<BBH", x.frac_bits, v.ndim, 0) + struct.pack(f"<{v.ndim}I", *v.shape)
    Path(path).write_bytes(header + v.astype("<i4").tobytes())


def read_fixed(path) -> FixedTensor:
    data = Path(path).read_bytes()
    if data[:4] != b"ABFX" or len(data) < 8:
        raise FormatError(f"{path}: not a flat fixed-point tensor (bad magic)")
    frac_bits, ndim, _ = struct.unpack("<BBH", data[4:8])
    shape = struct.unpack(f"<{ndim}I", data[8 : 8 + 4 * ndim])
    body = data[8 + 4 * ndim :]
    count = int(np.prod(shape, dtype=np.int64))
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} value bytes, found {len(body)}")
    return FixedTensor(np.frombuffer(body, dtype="<i4").astype(np.int32).reshape(shape), frac_bits)


def load_inputs(path, frac_bits: int) -> FixedTensor:
    """Read engine inputs: an IDX image array (quantized at ``frac_bits``) or a flat fixed file.

    The result always has a leading sample axis.
    """
    p = Path(path)
    head = p.read_bytes()[:4]
    if head == b"ABFX":
        x = read_fixed(p)
        if x.frac_bits != frac_bits:
            raise DataError(f"{p}: input is Q.{x.frac_bits} but the model expects Q.{frac_bits}")
        return x if x.values.ndim == 4 else x.reshape((1,) + x.shape)
    arr = read_idx(p)
    if arr.ndim == 2:  # single (h, w) image
        arr = arr[None]
    # 3-D arrays are (n, h, w); multi-channel inputs must be stored 4-D
    return FixedTensor.from_float(_as_images(arr), frac_bits)
