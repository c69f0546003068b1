"""Desk-scale two-step training: Adam, linear LR decay, AGC, CE or distillation loss."""
from __future__ import annotations

import json
import logging
import math
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Dataset
from .errors import ConfigError, ContractViolation, NumericalAbort
from .graphspec import GraphSpec
from .nfgraph import Network, TrainState, init_state, is_weight, softmax

log = logging.getLogger(__name__)

AGC_EPS = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DEFAULT_WEIGHT_DECAY = {"fp": 5e-6, "step1": 5e-6, "step2": 0.0}


@dataclass
class TrainConfig:
    phase: str = "step1"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float | None = None  # None -> phase default
    agc_lambda: float = 0.001
    agc_exclude: tuple[str, ...] = ()  # parameter-name prefixes, e.g. ("L12",)
    seed: int = 2023
    loss: str = "ce"
    teacher: str | None = None
    activation: str | None = None  # "quantized" | "rleaky:<exp>"; None keeps the spec
    alpha_exp: int | None = None
    init_checkpoint: str | None = None

    def validate(self, *, require_checkpoint: bool = True) -> None:
        if self.phase not in DEFAULT_WEIGHT_DECAY:
            raise ConfigError(f"phase must be one of {sorted(DEFAULT_WEIGHT_DECAY)}, got '{self.phase}'")
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.agc_lambda > 0:
            raise ConfigError(f"agc_lambda must be positive, got {self.agc_lambda}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.loss not in ("ce", "distill"):
            raise ConfigError(f"loss must be 'ce' or 'distill', got '{self.loss}'")
        if self.loss == "distill" and not self.teacher:
            raise ConfigError("loss=distill needs a teacher checkpoint path")
        if self.phase == "step2" and require_checkpoint and not self.init_checkpoint:
            raise ConfigError("phase step2 needs init_checkpoint pointing at a step1 checkpoint")

    @property
    def effective_weight_decay(self) -> float:
        return DEFAULT_WEIGHT_DECAY[self.phase] if self.weight_decay is None else self.weight_decay

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# --------------------------------------------------------------------------- formulas


def agc_clip(G, W, lam: float, eps: float = AGC_EPS):
    """Adaptive gradient clipping, unit-wise over the leading (output) axis."""
    G = np.asarray(G, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if G.shape != W.shape:
        raise ContractViolation(f"gradient shape {G.shape} does not match weight shape {W.shape}")
    if not lam > 0:
        raise ContractViolation(f"lambda must be positive, got {lam}")
    rows_g = G.reshape(G.shape[0], -1) if G.ndim > 1 else G.reshape(1, -1)
    rows_w = W.reshape(rows_g.shape)
    g_norm = np.sqrt((rows_g**2).sum(axis=1))
    w_norm = np.maximum(np.sqrt((rows_w**2).sum(axis=1)), eps)
    clip = g_norm > lam * w_norm
    scale = np.ones_like(g_norm)
    scale[clip] = lam * w_norm[clip] / g_norm[clip]
    return (rows_g * scale[:, None]).reshape(G.shape)


def distill_loss(p_teacher, p_student, *, atol: float = 1e-6) -> float:
    """Batch-mean KL(teacher || student) in nats."""
    pt = np.asarray(p_teacher, dtype=np.float64)
    ps = np.asarray(p_student, dtype=np.float64)
    if pt.shape != ps.shape or pt.ndim != 2:
        raise ContractViolation(f"expected matching (n, classes) arrays, got {pt.shape} and {ps.shape}")
    for name, p in (("teacher", pt), ("student", ps)):
        if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=atol, rtol=0):
            raise ContractViolation(f"{name} rows are not probability distributions")
    n = pt.shape[0]
    ps = np.clip(ps, 1e-12, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pt > 0, pt * np.log(ps / np.where(pt > 0, pt, 1.0)), 0.0)
    return float(-terms.sum() / n)


# --------------------------------------------------------------------------- optimisation


def lr_at(step: int, total_steps: int, lr0: float) -> float:
    return lr0 * (1.0 - step / total_steps)


def adam_update(state: TrainState, grads: dict, lr: float, weight_decay: float = 0.0) -> None:
    b1, b2 = ADAM_BETAS
    state.step += 1
    t = state.step
    for name, p in state.params.items():
        g = grads[name]
        if weight_decay and is_weight(name):
            g = g + weight_decay * p
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def clip_gradients(state: TrainState, grads: dict, config: TrainConfig) -> dict:
    out = dict(grads)
    for name, g in grads.items():
        if is_weight(name) and not name.startswith(tuple(config.agc_exclude)):
            out[name] = agc_clip(g, state.params[name], config.agc_lambda)
    return out


def _first_nonfinite(net: Network, state: TrainState, x, phase: str, grads=None) -> str:
    _, tape = net.forward(state, x, phase, record=True)
    for name, a in tape.activations.items():
        if not np.all(np.isfinite(a)):
            return name
    for name, p in state.params.items():
        if not np.all(np.isfinite(p)):
            return name
    for name, g in (grads or {}).items():
        if not np.all(np.isfinite(g)):
            return f"grad:{name}"
    return "loss"


@dataclass
class Teacher:
    net: Network
    state: TrainState

    @classmethod
    def load(cls, path) -> "Teacher":
        state = checkpoint.load(path)
        return cls(Network(state.spec), state)

    def probs(self, x):
        phase = self.state.phase if self.state.phase in ("fp", "step1", "step2") else "fp"
        logits, _ = self.net.forward(self.state, x, phase)
        return softmax(logits)


def train_step(state: TrainState, net: Network, x, y, config: TrainConfig, lr: float, teacher: Teacher | None = None):
    """One optimisation step; mutates ``state`` and returns batch metrics."""
    # overflow is reported as NumericalAbort below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        target = teacher.probs(x) if teacher is not None else None
        loss, logits, grads, _ = net.loss_and_grads(state, x, y, config.phase, target_probs=target)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalAbort(_first_nonfinite(net, state, x, config.phase, grads), state.step)
    grads = clip_gradients(state, grads, config)
    adam_update(state, grads, lr, config.effective_weight_decay)
    acc = float((logits.argmax(axis=1) == np.asarray(y)).mean())
    return {"loss": loss, "acc": acc, "lr": lr}


def evaluate(net: Network, state: TrainState, x, y, phase: str, batch_size: int = 500) -> tuple[float, float]:
    """Eval-mode loss and accuracy (no batch statistics exist, so eval == train forward)."""
    if len(y) == 0:
        return float("nan"), float("nan")
    correct, loss = 0, 0.0
    for i in range(0, len(y), batch_size):
        logits, _ = net.forward(state, x[i : i + batch_size], phase)
        p = softmax(logits)
        yy = np.asarray(y[i : i + batch_size])
        loss -= float(np.log(np.clip(p[np.arange(len(yy)), yy], 1e-300, None)).sum())
        correct += int((logits.argmax(axis=1) == yy).sum())
    return loss / len(y), correct / len(y)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Counter-based shuffle: depends only on (seed, epoch), not on batch size."""
    return np.random.Generator(np.random.Philox(key=seed, counter=[epoch, 0, 0, 0])).permutation(n)


def prepare_spec(spec: GraphSpec, config: TrainConfig) -> GraphSpec:
    spec = spec.with_activation(config.activation)
    if config.alpha_exp is not None:
        spec = GraphSpec(tuple(spec.input_shape), list(spec.layers), int(config.alpha_exp), spec.delta)
    spec.validate_trainable()
    return spec


def train_phase(spec: GraphSpec, data: Dataset, config: TrainConfig, state: TrainState | None = None,
                *, log_path=None) -> tuple[TrainState, list[dict]]:
    """Train one phase; ``state`` None means fresh seeded initialisation."""
    config.validate(require_checkpoint=state is None)
    spec = prepare_spec(spec, config)
    if state is None:
        if config.init_checkpoint:
            state = checkpoint.load(config.init_checkpoint)
            checkpoint.check_compatible(spec, state)
            state.spec = spec
            state.reset_optimizer()
        else:
            state = init_state(spec, config.seed)
    else:
        checkpoint.check_compatible(spec, state)
    if tuple(data.input_shape) != tuple(spec.input_shape):
        raise ContractViolation(f"data shape {data.input_shape} does not match spec input {spec.input_shape}")
    net = Network(spec)
    teacher = Teacher.load(config.teacher) if config.loss == "distill" else None
    x_train = data.x_train.astype(np.float64)
    x_test = data.x_test.astype(np.float64)
    n = len(data.y_train)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    history = []
    t = 0
    for epoch in range(config.epochs):
        order = epoch_order(config.seed, epoch, n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            m = train_step(state, net, x_train[idx], data.y_train[idx], config, lr_at(t, total, config.lr), teacher)
            losses.append(m["loss"])
            t += 1
        train_loss, train_acc = evaluate(net, state, x_train, data.y_train, config.phase)
        test_loss, test_acc = evaluate(net, state, x_test, data.y_test, config.phase)
        record = {
            "phase": config.phase,
            "epoch": epoch + 1,
            "batch_loss": float(np.mean(losses)) if losses else float("nan"),
            "train_loss": train_loss,
            "train_acc": train_acc,
            "test_loss": test_loss,
            "test_acc": test_acc,
            "lr_end": lr_at(t, total, config.lr),
        }
        history.append(record)
        log.info("%s epoch %d: loss %.4f train %.4f test %.4f", config.phase, epoch + 1, train_loss, train_acc, test_acc)
        if log_path is not None:
            append_jsonl(log_path, record)
    state.phase = config.phase
    return state, history


def run_two_step(spec: GraphSpec, data: Dataset, config1: TrainConfig, config2: TrainConfig,
                 workdir=None, *, log_path=None) -> tuple[TrainState, list[dict]]:
    """Step 1 (binary activations) then step 2 (binary weights too), warm-started from a checkpoint."""
    if config1.phase != "step1" or config2.phase != "step2":
        raise ConfigError("run_two_step expects a step1 config followed by a step2 config")
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="abbnn-")
        workdir = tmp.name
    try:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        state1, hist1 = train_phase(spec, data, config1, log_path=log_path)
        ckpt1 = workdir / "step1.abck"
        checkpoint.save(state1, ckpt1)
        if not config2.init_checkpoint:
            config2 = replace(config2, init_checkpoint=str(ckpt1))
        state2, hist2 = train_phase(spec, data, config2, log_path=log_path)
        checkpoint.save(state2, workdir / "step2.abck")
    finally:
        if tmp is not None:
            tmp.cleanup()
    return state2, hist1 + hist2


def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
