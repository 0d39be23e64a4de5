"""Stage-1 expert training: only adapter cores (or LoRA factors) move."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ttmoe.errors import ConfigError, TrainingDivergence
from ttmoe.model import BaseModel, new_expert, new_lora_adapter
from ttmoe.tensor import cross_entropy
from ttmoe.tt import TtShape

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    alpha: float = 1.0
    rank: int = 3
    q_input_factors: tuple[int, ...] = (8, 8)
    q_output_factors: tuple[int, ...] = (8, 8)
    v_input_factors: tuple[int, ...] = (8, 8)
    v_output_factors: tuple[int, ...] = (4, 4)
    init_std: float = 0.02
    clip_norm: float | None = 1.0
    method: str = "tt"  # or "lora"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.method not in ("tt", "lora"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")

    @property
    def q_shape(self) -> TtShape:
        return TtShape(self.q_input_factors, self.q_output_factors, self.rank)

    @property
    def v_shape(self) -> TtShape:
        return TtShape(self.v_input_factors, self.v_output_factors, self.rank)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)  # entry 0 is before any update
    best_epoch: int = 0
    trainable_params: int = 0
    clipped_steps: int = 0
    stopped_early: bool = False
    wall_clock_s: float = 0.0

    @property
    def best_accuracy(self) -> float:
        return self.val_accuracy[self.best_epoch]

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["best_accuracy"] = self.best_accuracy
        return rec


@dataclass
class OptimizerState:
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def optimizer_step(params, grads, state: OptimizerState, lr: float, kind: str = "adam",
                   labels=None) -> OptimizerState:
    """Update ``params`` in place.  ``labels`` name each tensor in error messages."""
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ConfigError(f"gradient {i} has shape {g.shape}, param has {p.shape}")
        if not np.all(np.isfinite(g)):
            where = labels[i] if labels else f"tensor {i}"
            raise TrainingDivergence(f"non-finite gradient at {where}")
    if kind == "sgd":
        for p, g in zip(params, grads):
            p -= (lr * g).astype(p.dtype)
        state.step += 1
        return state
    b1, b2 = ADAM_BETAS
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)
    return state


def clip_global_norm(grads, max_norm):
    """Scale ``grads`` in place to at most ``max_norm``; returns True if clipped."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm is not None and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
        return True
    return False


def predict(base: BaseModel, adapter, tokens, batch_size: int = 256) -> np.ndarray:
    """Argmax class per row.  ``np.argmax`` breaks ties toward the lowest index."""
    out = []
    for s in range(0, len(tokens), batch_size):
        _, logits = base.forward(tokens[s:s + batch_size], adapter)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(base: BaseModel, adapter, tokens, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(base, adapter, tokens) == labels))


def _param_labels(adapter) -> list[str]:
    labels = []
    for layer, (q, v) in enumerate(adapter.deltas):
        for name, delta in (("q", q), ("v", v)):
            labels.extend(f"layer {layer} {name} core {k}" for k in range(len(delta.params)))
    return labels


def train_expert(base: BaseModel, task, config: TrainConfig, expert_id: int = 0):
    """Fit one adapter on ``task``; returns ``(adapter_at_best_epoch, TrainReport)``."""
    x_train, y_train = task.split("train")
    x_val, y_val = task.split("validation")
    if len(y_train) == 0 or len(y_val) == 0:
        raise ConfigError(f"task {task.name!r} has an empty train or validation split")
    start = time.perf_counter()
    if config.method == "tt":
        adapter = new_expert(base.config, config.q_shape, config.v_shape, task.num_classes,
                             config.seed, config.alpha, config.init_std, expert_id, task.name)
    else:
        adapter = new_lora_adapter(base.config, config.rank, task.num_classes, config.seed,
                                   config.alpha, config.init_std, expert_id, task.name)
    params = adapter.trainable_params()
    labels = _param_labels(adapter)
    report = TrainReport(trainable_params=sum(p.size for p in params))
    report.val_accuracy.append(evaluate(base, adapter, x_val, y_val))
    best = [p.copy() for p in params]
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(y_train))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            batch_loss = []

            def loss_grad(logits, y=y_train[idx]):
                loss, d_logits = cross_entropy(logits, y)
                batch_loss.append(loss)
                return d_logits

            _, grads = base.forward_backward(x_train[idx], adapter, loss_grad)
            loss = batch_loss[0]
            if not np.isfinite(loss):
                report.wall_clock_s = time.perf_counter() - start
                raise TrainingDivergence(f"loss became {loss} in epoch {epoch}", report)
            report.clipped_steps += clip_global_norm(grads, config.clip_norm)
            try:
                optimizer_step(params, grads, state, config.learning_rate, config.optimizer, labels)
            except TrainingDivergence as exc:
                exc.report = report
                raise
            losses.append(loss * len(idx))
        report.train_loss.append(float(sum(losses) / len(order)))
        report.val_accuracy.append(evaluate(base, adapter, x_val, y_val))
        if report.val_accuracy[-1] > report.best_accuracy:
            report.best_epoch = epoch
            best = [p.copy() for p in params]
        elif epoch - report.best_epoch >= config.patience:
            report.stopped_early = True
            break
    for p, b in zip(params, best):
        p[...] = b
    report.wall_clock_s = time.perf_counter() - start
    return adapter, report
