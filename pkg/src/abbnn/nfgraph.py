"""Normalizer-free binary network: layer ops, manual gradients, network assembly.

All tensors are float64, batch-first ``(B, C, H, W)``. Three execution phases:

``fp``      activations and weights full precision (teacher networks)
``step1``   binary activations, full-precision standardized weights
``step2``   binary activations and weights, ``kappa_i * sign(W_hat_i)``

With ``surrogate=True`` the sign is replaced by the mask function
``sigmoid(delta*u) - 1/2`` and the PReLU exponent is left unrounded. The
backward pass is the same in both modes, so the surrogate forward is what
finite differences are checked against.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, DegenerateRowError
from .graphspec import GraphSpec, ResolvedLayer

PHASES = ("fp", "step1", "step2")


# --------------------------------------------------------------------------- helpers


def _chan(v, ndim: int):
    v = np.asarray(v, dtype=np.float64)
    if ndim == 4:
        return v.reshape(1, -1, 1, 1)
    if ndim == 3:
        return v.reshape(-1, 1, 1)
    return v


def _chan_sum(g):
    """Reduce a tensor to per-channel sums (channel axis 1 for 4-D, else 0)."""
    if g.ndim == 4:
        return g.sum(axis=(0, 2, 3))
    if g.ndim == 3:
        return g.sum(axis=(1, 2))
    return g


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def round_half_even(x):
    return np.round(x)


def pow2(e):
    return np.ldexp(1.0, np.asarray(e, dtype=np.int64)) if np.ndim(e) else float(np.ldexp(1.0, int(e)))


# --------------------------------------------------------------------------- convolution


def _im2col(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    _, _, Ho, Wo, _, _ = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, (B, C, H, W, Ho, Wo)


def conv2d(x, w, stride=1, pad=0):
    """Direct convolution via patch matrix; returns output and a backward cache."""
    O, C, kh, kw = w.shape
    cols, dims = _im2col(x, kh, kw, stride, pad)
    B, _, _, _, Ho, Wo = dims
    y = (cols @ w.reshape(O, -1).T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, dims, stride, pad)


def conv2d_backward(g, w, cache):
    cols, (B, C, H, W, Ho, Wo), stride, pad = cache
    O, _, kh, kw = w.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
    grad_w = (gm.T @ cols).reshape(w.shape)
    gcols = (gm @ w.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    gx = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += (
                gcols[..., i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx, grad_w


# --------------------------------------------------------------------------- SWS


def sws_standardize(W, gamma: float = 1.0):
    """Scaled weight standardization, row-wise over the output channel axis."""
    W = np.asarray(W, dtype=np.float64)
    rows = W.reshape(W.shape[0], -1)
    N = rows.shape[1]
    if N < 2:
        raise ContractViolation(f"fan-in must be >= 2 for standardization, got {N}")
    mu = rows.mean(axis=1, keepdims=True)
    centered = rows - mu
    sigma = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    # rounding leaves a tiny sigma on constant rows, so compare against the row scale
    scale = np.abs(rows).max(axis=1, keepdims=True)
    bad = np.flatnonzero(sigma[:, 0] <= 1e-12 * scale[:, 0])
    if bad.size:
        raise DegenerateRowError(int(bad[0]))
    return (gamma * centered / (np.sqrt(N) * sigma)).reshape(W.shape)


def sws_backward(W, grad_hat, gamma: float = 1.0):
    rows = np.asarray(W, dtype=np.float64).reshape(W.shape[0], -1)
    g = np.asarray(grad_hat, dtype=np.float64).reshape(rows.shape)
    N = rows.shape[1]
    centered = rows - rows.mean(axis=1, keepdims=True)
    sigma = np.sqrt((centered**2).mean(axis=1, keepdims=True))
    z = centered / sigma
    scale = gamma / (np.sqrt(N) * sigma)
    grad = scale * (g - g.mean(axis=1, keepdims=True) - z * (g * z).mean(axis=1, keepdims=True))
    return grad.reshape(W.shape)


def kappa_exponents(W_hat) -> np.ndarray:
    """Per-row power-of-two exponent of the l1 scaling factor ``||W_hat_i||_1 / N``."""
    rows = np.abs(W_hat.reshape(W_hat.shape[0], -1))
    m = rows.mean(axis=1)
    with np.errstate(divide="ignore"):
        return round_half_even(np.log2(m))


# --------------------------------------------------------------------------- binary conv


def binarized_weights(W_hat):
    """``kappa * sign(W_hat)`` with kappa quantized to a power of two."""
    k = kappa_exponents(W_hat)
    sign = np.where(W_hat >= 0, 1.0, -1.0)
    return _rows_scale(sign, np.ldexp(1.0, k.astype(np.int64))), k


def _rows_scale(a, s):
    return a * s.reshape((-1,) + (1,) * (a.ndim - 1))


def binconv_forward(x, W, layer: dict, phase: str):
    """Binary convolution on standardized weights.

    ``layer`` carries ``stride`` and ``pad``. Returns ``(y, cache)``.
    """
    if phase not in PHASES:
        raise ContractViolation(f"unknown phase '{phase}'")
    if x.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ContractViolation(f"input {x.shape} does not match weights {W.shape}")
    W_hat = sws_standardize(W)
    if phase == "step2":
        W_eff, _ = binarized_weights(W_hat)
    else:
        W_eff = W_hat
    y, conv_cache = conv2d(x, W_eff, layer.get("stride", 1), layer.get("pad", 0))
    return y, (W, W_hat, W_eff, phase, conv_cache)


def binconv_backward(g, cache):
    W, W_hat, W_eff, phase, conv_cache = cache
    gx, g_eff = conv2d_backward(g, W_eff, conv_cache)
    if phase == "step2":
        k = kappa_exponents(W_hat)
        kappa = np.ldexp(1.0, k.astype(np.int64))
        sign = np.where(W_hat >= 0, 1.0, -1.0)
        N = W_hat[0].size
        through_sign = _rows_scale(g_eff * (np.abs(W_hat) <= 1.0), kappa)
        through_kappa = _rows_scale(sign, (g_eff * sign).reshape(len(W), -1).sum(axis=1) / N)
        g_hat = through_sign + through_kappa
    else:
        g_hat = g_eff
    return gx, sws_backward(W, g_hat)


# --------------------------------------------------------------------------- masked sign


def masked_sign_forward(x, xi, beta: float, *, surrogate: bool = False, delta: float = 3.0, phase: str = "step2"):
    """``sign(x / beta + xi_c)``; the mask only shapes the backward pass."""
    if not beta > 0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    u = x / beta + _chan(xi, np.ndim(x))
    if phase == "fp":
        return u
    if surrogate:
        return _sigmoid(delta * u) - 0.5
    # same decision as u >= 0, but immune to x / beta underflowing to -0.0;
    # this is exactly the folded threshold compare
    return np.where(x >= -_chan(xi, np.ndim(x)) * beta, 1.0, -1.0)


def mask_derivative(u, delta: float = 3.0):
    s = _sigmoid(delta * u)
    return delta * s * (1.0 - s)


def masked_sign_backward(grad_out, x, xi, beta: float, delta: float = 3.0, phase: str = "step2"):
    u = x / beta + _chan(xi, np.ndim(x))
    d = np.ones_like(u) if phase == "fp" else mask_derivative(u, delta)
    gu = grad_out * d
    return gu / beta, _chan_sum(gu)


# --------------------------------------------------------------------------- quantized RPReLU


def _slope_exponent(a, slope_exp, surrogate):
    if slope_exp is not None:
        return np.full(np.shape(a), float(slope_exp))
    a = np.asarray(a, dtype=np.float64)
    return a if surrogate else round_half_even(a)


def qrprelu_forward(y, a, xi1, xi2, slope_exp: int | None = None, *, surrogate: bool = False):
    """``y`` for ``y >= 0`` else ``2**round(a_c) * (y + xi1_c) + xi2_c``.

    ``slope_exp`` fixes the exponent for every channel (RLeakyReLU ablation).
    """
    nd = np.ndim(y)
    e = _slope_exponent(a, slope_exp, surrogate)
    s = _chan(np.exp2(e), nd)
    neg = s * (y + _chan(xi1, nd)) + _chan(xi2, nd)
    return np.where(y >= 0, y, neg)


def qrprelu_backward(grad_out, y, a, xi1, xi2, slope_exp: int | None = None, *, surrogate: bool = False):
    nd = np.ndim(y)
    e = _slope_exponent(a, slope_exp, surrogate)
    s = _chan(np.exp2(e), nd)
    mask = y < 0
    gneg = np.where(mask, grad_out, 0.0)
    grad_y = np.where(mask, grad_out * s, grad_out)
    grad_xi1 = _chan_sum(gneg * s)
    grad_xi2 = _chan_sum(gneg)
    if slope_exp is None:
        grad_a = _chan_sum(gneg * np.log(2.0) * s * (y + _chan(xi1, nd)))
    else:
        grad_a = np.zeros(np.shape(a))
    return grad_y, grad_a, grad_xi1, grad_xi2


# --------------------------------------------------------------------------- pooling / residual


def avgpool_forward(x):
    """Non-overlapping 2x2 mean over the last two axes."""
    *lead, H, W = x.shape
    if H % 2 or W % 2:
        raise ContractViolation(f"avgpool needs even spatial dims, got {H}x{W}")
    return x.reshape(*lead, H // 2, 2, W // 2, 2).sum(axis=(-3, -1)) / 4.0


def avgpool_backward(g):
    return np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0


def shortcut_forward(x, pool: bool, repeat: int):
    if pool:
        x = avgpool_forward(x)
    if repeat > 1:
        x = np.concatenate([x] * repeat, axis=-3)
    return x


def shortcut_backward(g, pool: bool, repeat: int):
    if repeat > 1:
        c = g.shape[-3] // repeat
        g = sum(g[..., r * c : (r + 1) * c, :, :] for r in range(repeat))
    if pool:
        g = avgpool_backward(g)
    return g


def nf_residual_forward(x, branch, alpha_exp: int, beta: float):
    """``x + 2**alpha_exp * branch(x, beta)``.

    ``branch`` receives the unscaled input and beta; its leading masked sign
    performs the division. A branch that halves the spatial size or multiplies
    the channel count gets a pooled / repeated shortcut.
    """
    if not beta > 0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    f = np.asarray(branch(x, beta), dtype=np.float64)
    if np.ndim(f) == 0:
        f = np.full(np.shape(x), float(f))
    pool = f.shape[-2:] != x.shape[-2:]
    if pool and f.shape[-2:] != (x.shape[-2] // 2, x.shape[-1] // 2):
        raise ContractViolation(f"branch output {f.shape} incompatible with input {x.shape}")
    if f.shape[-3] % x.shape[-3]:
        raise ContractViolation(f"branch channels {f.shape[-3]} not a multiple of {x.shape[-3]}")
    return shortcut_forward(x, pool, f.shape[-3] // x.shape[-3]) + pow2(alpha_exp) * f


# --------------------------------------------------------------------------- beta


def variance_trace(spec: GraphSpec) -> list[tuple[int, float]]:
    """Analytic activation variance at each block entry: ``[(block_index, var)]``.

    Var starts at 1, grows by ``alpha**2`` per block and resets to 1 after a
    downsampling block.
    """
    var = 1.0
    trace = []
    for r in spec.resolve():
        if r.kind == "block":
            trace.append((r.index, var))
        elif r.kind == "end":
            alpha = pow2(spec.block_alpha(spec.layers[r.block]))
            var = 1.0 if r.downsample else var + alpha * alpha
    return trace


def init_betas(spec: GraphSpec) -> dict[int, float]:
    return {idx: float(np.sqrt(var)) for idx, var in variance_trace(spec)}


# --------------------------------------------------------------------------- state


@dataclass
class TrainState:
    """Everything needed to resume training or fold a network."""

    spec: GraphSpec
    params: dict[str, np.ndarray]
    betas: dict[int, float]
    phase: str = "init"
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for idx, beta in self.betas.items():
            if not beta > 0:
                raise ContractViolation(f"beta of block {idx} must be positive, got {beta}")
        if not self.m:
            self.reset_optimizer()

    def reset_optimizer(self):
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    def copy(self) -> "TrainState":
        return copy.deepcopy(self)

    def beta_for(self, r: ResolvedLayer) -> float:
        return 1.0 if r.block is None else self.betas[r.block]


def pname(index: int, name: str) -> str:
    return f"L{index:02d}.{name}"


def init_state(spec: GraphSpec, seed: int = 2023) -> TrainState:
    """Seeded initialization; PReLU a=-2, all offsets 0, latent weights N(0,1)."""
    spec.validate_trainable()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for r in spec.resolve():
        f, c = r.spec.fields, r.in_shape[0]
        if r.kind == "firstconv":
            shape = (f["c_out"], c, f["kh"], f["kw"])
            params[pname(r.index, "W")] = rng.normal(0.0, 1.0 / np.sqrt(c * f["kh"] * f["kw"]), shape)
            params[pname(r.index, "b")] = np.zeros(f["c_out"])
        elif r.kind == "binconv":
            params[pname(r.index, "W")] = rng.normal(0.0, 1.0, (f["c_out"], c, f["kh"], f["kw"]))
        elif r.kind == "dense":
            params[pname(r.index, "W")] = rng.normal(0.0, 1.0, (f["n_out"], c))
        elif r.kind == "lastdense":
            params[pname(r.index, "W")] = rng.normal(0.0, 0.1 / np.sqrt(c), (f["n_out"], c))
            params[pname(r.index, "b")] = np.zeros(f["n_out"])
        elif r.kind == "maskedsign":
            params[pname(r.index, "xi")] = np.zeros(c)
        elif r.kind in ("qrprelu", "rleaky"):
            params[pname(r.index, "a")] = np.full(c, -2.0)
            params[pname(r.index, "xi1")] = np.zeros(c)
            params[pname(r.index, "xi2")] = np.zeros(c)
    state = TrainState(spec, params, init_betas(spec))
    for r in spec.resolve():
        if r.kind == "qrprelu":
            a, x1, x2 = (params[pname(r.index, n)] for n in ("a", "xi1", "xi2"))
            assert np.allclose(x2, -np.exp2(round_half_even(a)) * x1), "PReLU init must be continuous at 0"
    return state


def is_weight(name: str) -> bool:
    return name.endswith(".W")


# --------------------------------------------------------------------------- network


@dataclass
class Tape:
    entries: list = field(default_factory=list)
    signs: dict[int, np.ndarray] = field(default_factory=dict)
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    surrogate: bool = False


class Network:
    """Executes a GraphSpec against a TrainState with a manual backward pass."""

    def __init__(self, spec: GraphSpec):
        spec.validate_trainable()
        self.spec = spec
        self.layers = spec.resolve()
        self.delta = spec.delta

    def forward(self, state: TrainState, x, phase: str, *, surrogate: bool = False, record: bool = False):
        if phase not in PHASES:
            raise ContractViolation(f"unknown phase '{phase}'")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ContractViolation(f"input shape {x.shape[1:]} does not match {self.spec.input_shape}")
        p = state.params
        tape = Tape(surrogate=surrogate)
        stack = []
        for r in self.layers:
            i, kind, f = r.index, r.kind, r.spec.fields
            cache = None
            if kind == "firstconv":
                y, cache = conv2d(x, p[pname(i, "W")], f.get("stride", 1), f.get("pad", 0))
                x = y + _chan(p[pname(i, "b")], 4)
            elif kind == "maskedsign":
                beta = state.beta_for(r)
                cache = (x, beta)
                x = masked_sign_forward(x, p[pname(i, "xi")], beta, surrogate=surrogate, delta=self.delta, phase=phase)
                if record:
                    tape.signs[i] = x
            elif kind == "binconv":
                x, cache = binconv_forward(x, p[pname(i, "W")], f, phase)
            elif kind == "dense":
                W = p[pname(i, "W")]
                y, cache = binconv_forward(x, W.reshape(W.shape + (1, 1)), {}, phase)
                x = y
            elif kind in ("qrprelu", "rleaky"):
                slope = f.get("slope_exp") if kind == "rleaky" else None
                cache = (x, slope)
                x = qrprelu_forward(x, p[pname(i, "a")], p[pname(i, "xi1")], p[pname(i, "xi2")], slope, surrogate=surrogate)
            elif kind == "avgpool":
                x = avgpool_forward(x)
            elif kind == "block":
                stack.append(x)
            elif kind == "end":
                entry = stack.pop()
                alpha = pow2(self.spec.block_alpha(self.spec.layers[r.block]))
                x = shortcut_forward(entry, r.pool_shortcut, r.repeat) + alpha * x
                cache = alpha
            elif kind == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1, 1, 1)
            elif kind == "lastdense":
                flat = x.reshape(x.shape[0], -1)
                cache = flat
                x = flat @ p[pname(i, "W")].T + p[pname(i, "b")]
            tape.entries.append((r, cache))
            if record:
                tape.activations[f"{pname(i, kind)}.out"] = x
        return x, tape

    def backward(self, state: TrainState, tape: Tape, grad_logits, phase: str):
        p = state.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        g = np.asarray(grad_logits, dtype=np.float64)
        stack = []
        for r, cache in reversed(tape.entries):
            i, kind = r.index, r.kind
            if kind == "lastdense":
                flat = cache
                grads[pname(i, "W")] += g.T @ flat
                grads[pname(i, "b")] += g.sum(axis=0)
                g = (g @ p[pname(i, "W")]).reshape((-1,) + r.in_shape)
            elif kind == "flatten":
                g = g.reshape(cache)
            elif kind == "end":
                stack.append(shortcut_backward(g, r.pool_shortcut, r.repeat))
                g = cache * g
            elif kind == "block":
                g = g + stack.pop()
            elif kind == "avgpool":
                g = avgpool_backward(g)
            elif kind in ("qrprelu", "rleaky"):
                y, slope = cache
                g, ga, gx1, gx2 = qrprelu_backward(
                    g, y, p[pname(i, "a")], p[pname(i, "xi1")], p[pname(i, "xi2")], slope,
                    surrogate=tape.surrogate,
                )
                grads[pname(i, "a")] += ga
                grads[pname(i, "xi1")] += gx1
                grads[pname(i, "xi2")] += gx2
            elif kind == "binconv":
                g, gw = binconv_backward(g, cache)
                grads[pname(i, "W")] += gw
            elif kind == "dense":
                g, gw = binconv_backward(g, cache)
                grads[pname(i, "W")] += gw.reshape(p[pname(i, "W")].shape)
            elif kind == "maskedsign":
                x, beta = cache
                g, gxi = masked_sign_backward(g, x, p[pname(i, "xi")], beta, self.delta, phase)
                grads[pname(i, "xi")] += gxi
            elif kind == "firstconv":
                _, gw = conv2d_backward(g, p[pname(i, "W")], cache)
                grads[pname(i, "W")] += gw
                grads[pname(i, "b")] += g.sum(axis=(0, 2, 3))
                g = None
        return grads

    def loss_and_grads(self, state, x, labels=None, phase="step1", *, target_probs=None, surrogate=False):
        """Forward, loss (CE or distillation against ``target_probs``) and gradients."""
        logits, tape = self.forward(state, x, phase, surrogate=surrogate)
        probs = softmax(logits)
        n = logits.shape[0]
        if target_probs is None:
            labels = np.asarray(labels)
            loss = float(-np.mean(np.log(np.clip(probs[np.arange(n), labels], 1e-300, None))))
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
        else:
            from .trainer import distill_loss

            loss = distill_loss(target_probs, probs)
            g = probs - target_probs
        grads = self.backward(state, tape, g / n, phase)
        return loss, logits, grads, tape


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
