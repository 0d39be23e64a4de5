"""Noisy top-1 router over a bank of frozen experts.

Routing uses the pooled hidden state of an un-adapted base pass.  The chosen
expert then runs a second full pass with its Q/V cores and its own head.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ttmoe.errors import ConfigError, ShapeError, TrainingDivergence
from ttmoe.model import BaseModel, ExpertAdapter, digest
from ttmoe.tensor import cross_entropy, sigmoid, softmax, softplus
from ttmoe.train import OptimizerState, optimizer_step


def router_param_count(d: int, n: int) -> int:
    """Gate weight and bias plus a bias-free noise projection."""
    if d < 1 or n < 1:
        raise ConfigError("d and n must be >= 1")
    return 2 * d * n + n


@dataclass
class RouterParams:
    w_gate: np.ndarray  # [d, N]
    b_gate: np.ndarray  # [N]
    w_noise: np.ndarray  # [d, N]
    expert_names: list[str] = field(default_factory=list)
    lam: float = 1.0

    def __post_init__(self):
        d, n = self.w_gate.shape
        if self.b_gate.shape != (n,) or self.w_noise.shape != (d, n):
            raise ShapeError("router parameter shapes disagree")

    @property
    def d(self) -> int:
        return self.w_gate.shape[0]

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        return [self.w_gate, self.b_gate, self.w_noise]

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    @classmethod
    def init(cls, d: int, n: int, seed: int = 0, std: float = 0.01, dtype=np.float32,
             expert_names=None, lam: float = 1.0) -> "RouterParams":
        rng = np.random.default_rng(seed)
        return cls((std * rng.standard_normal((d, n))).astype(dtype), np.zeros(n, dtype),
                   np.zeros((d, n), dtype), list(expert_names or []), lam)


class ExpertBank:
    """Frozen experts stacked per layer; addressed by expert index."""

    def __init__(self, experts: list[ExpertAdapter]):
        if not experts:
            raise ConfigError("expert bank is empty")
        hashes = {e.config_hash for e in experts}
        if len(hashes) != 1:
            raise ConfigError(f"experts were trained against different base configs: {sorted(hashes)}")
        self.experts = [e.copy() for e in experts]
        for i, e in enumerate(self.experts):
            e.expert_id = i
            for p in e.trainable_params():
                p.setflags(write=False)
        self.config_hash = hashes.pop()
        n_layers = len(self.experts[0].q_cores)
        # stacks[layer]["q"][k] is [N, r, f, r] so a gate index selects one chain
        self.stacks = []
        try:
            for layer in range(n_layers):
                self.stacks.append({
                    "q": [np.stack([e.q_cores[layer].cores[k] for e in self.experts])
                          for k in range(len(self.experts[0].q_cores[layer].cores))],
                    "v": [np.stack([e.v_cores[layer].cores[k] for e in self.experts])
                          for k in range(len(self.experts[0].v_cores[layer].cores))],
                })
        except ValueError:
            self.stacks = None  # heterogeneous TT shapes: fall back to per-expert lists

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, i: int) -> ExpertAdapter:
        return self.experts[i]

    @property
    def names(self) -> list[str]:
        return [e.task_name for e in self.experts]

    def index_of(self, task_name: str) -> int:
        return self.names.index(task_name)

    def digests(self) -> list[str]:
        return [digest(e.trainable_params() + [e.head.weight, e.head.bias]) for e in self.experts]


@dataclass
class GateDecision:
    noisy_logits: np.ndarray  # [B, N]
    masked_logits: np.ndarray  # [B, N]
    gates: np.ndarray  # [B, N], one-hot when k == 1
    selected: np.ndarray  # [B]
    noise: np.ndarray | None = None  # standard normals used, [B, N]


def noisy_gate(h, params: RouterParams, mode: str = "eval", rng=None):
    """Gate logits; in train mode adds N(0,1) * softplus(h @ w_noise) per entry.

    Returns ``(logits, noise)`` where ``noise`` is ``None`` in eval mode.
    """
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[1] != params.d:
        raise ShapeError(f"hidden {h.shape} does not match router dim {params.d}")
    clean = h @ params.w_gate + params.b_gate
    if mode == "eval":
        return clean, None
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ConfigError("train mode needs a random generator")
    eps = np.asarray(rng.standard_normal(clean.shape), dtype=clean.dtype)
    return clean + eps * softplus(h @ params.w_noise), eps


def topk_mask(g, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries per row, the rest become ``-inf``.

    Ties go to the lower index.
    """
    g = np.asarray(g)
    n = g.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in [1, {n}], got {k}")
    # stable sort on -g keeps lower indices first among equal values
    order = np.argsort(-g, axis=-1, kind="stable")
    keep = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    return np.where(keep, g, -np.inf)


def gate_vector(g, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over the top-k logits and the argmax index per row."""
    masked = topk_mask(g, k)
    gates = softmax(masked)
    return gates, np.argmax(masked, axis=-1)


def route(h, params: RouterParams, mode: str = "eval", rng=None, k: int = 1) -> GateDecision:
    logits, noise = noisy_gate(h, params, mode, rng)
    masked = topk_mask(logits, k)
    gates, selected = gate_vector(logits, k)
    return GateDecision(logits, masked, gates, selected, noise)


@dataclass
class MoeOutput:
    logits: list[np.ndarray]  # per sample; widths follow the selected expert's head
    decision: GateDecision
    hidden: np.ndarray

    def predictions(self) -> np.ndarray:
        return np.array([int(np.argmax(row)) for row in self.logits], dtype=np.int64)


def moe_forward(tokens, base: BaseModel, bank: ExpertBank, params: RouterParams,
                mode: str = "eval", rng=None) -> MoeOutput:
    """Two passes: route on the un-adapted base, then run each selected expert."""
    if len(bank) == 0:
        raise ConfigError("expert bank is empty")
    if params.d != base.config.d_model or params.n_experts != len(bank):
        raise ConfigError("router dimensions do not match base model and bank")
    tokens = np.asarray(tokens)
    hidden, _ = base.forward(tokens)
    decision = route(hidden, params, mode, rng)
    logits: list[np.ndarray] = [None] * len(tokens)
    for e in np.unique(decision.selected):
        rows = np.flatnonzero(decision.selected == e)
        _, out = base.forward(tokens[rows], bank[int(e)])
        for r, row in zip(rows, out):
            logits[r] = row
    return MoeOutput(logits, decision, hidden)


@dataclass
class LossParts:
    total: float
    task: float
    router: float
    grad_router_logits: np.ndarray  # d total / d g, [B, N]


def combined_loss(task_logits, y, router_logits, t, lam: float = 1.0,
                  skip_undefined: bool = False) -> LossParts:
    """Task cross-entropy plus ``lam`` times router cross-entropy.

    ``task_logits`` is a list of per-sample rows (widths may differ).  With
    top-1 dispatch the applied gate weight is the constant 1, so only the
    router term produces a gradient w.r.t. the router logits.

    A misrouted sample can carry a label wider than the selected head.  By
    default that raises ``IndexError``; ``skip_undefined`` drops such samples
    from the task mean instead.
    """
    y = np.asarray(y)
    if len(task_logits) != len(y):
        raise ShapeError("task logits and labels differ in length")
    task_losses = []
    for row, label in zip(task_logits, y):
        row = np.asarray(row)
        if skip_undefined and label >= row.shape[0]:
            continue
        task_losses.append(cross_entropy(row[None, :], [label])[0])
    task = float(np.mean(task_losses)) if task_losses else 0.0
    router, grad = cross_entropy(router_logits, t)
    return LossParts(task + lam * router, task, router, lam * grad)


def router_backward(h, params: RouterParams, noise, grad_logits) -> list[np.ndarray]:
    """Gradients w.r.t. ``[w_gate, b_gate, w_noise]`` given d loss / d logits."""
    grads = [h.T @ grad_logits, grad_logits.sum(axis=0)]
    if noise is None:
        grads.append(np.zeros_like(params.w_noise))
    else:
        pre = h @ params.w_noise
        grads.append(h.T @ (grad_logits * noise * sigmoid(pre)))
    return [g.astype(p.dtype) for g, p in zip(grads, params.params)]


@dataclass
class RouterConfig:
    epochs: int = 100
    learning_rate: float = 1e-2
    batch_size: int = 64
    lam: float = 1.0
    seed: int = 0
    init_std: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("invalid router training configuration")


@dataclass
class RouterReport:
    train_loss: list[float] = field(default_factory=list)
    task_loss: list[float] = field(default_factory=list)
    router_loss: list[float] = field(default_factory=list)
    routing_accuracy: list[float] = field(default_factory=list)  # held-out, per epoch
    final_routing_accuracy: float = 0.0
    trainable_params: int = 0
    wall_clock_s: float = 0.0

    def to_record(self) -> dict:
        return asdict(self)


def routing_accuracy(base: BaseModel, params: RouterParams, tokens, t, hidden=None) -> float:
    if hidden is None:
        hidden, _ = base.forward(tokens)
    return float(np.mean(route(hidden, params).selected == np.asarray(t)))


def _expert_logit_table(base, bank, tokens):
    return [base.forward(tokens, bank[e])[1] for e in range(len(bank))]


def train_router(base: BaseModel, bank: ExpertBank, mixed, config: RouterConfig = RouterConfig(),
                 eval_mixed=None):
    """Fit ``w_gate``, its bias and ``w_noise`` on a mixed dataset; experts stay frozen.

    Returns ``(RouterParams, RouterReport)``.  Routing accuracy is measured on
    ``eval_mixed`` when given, otherwise on the training mix.
    """
    if len(mixed) == 0:
        raise ConfigError("mixed dataset is empty")
    start = time.perf_counter()
    dtype = base.config.dtype
    params = RouterParams.init(base.config.d_model, len(bank), config.seed, config.init_std,
                               dtype, bank.names, config.lam)
    # The base is frozen, so pass-1 features and each expert's pass-2 logits
    # are fixed per sample and computed once.
    hidden, _ = base.forward(mixed.tokens)
    table = _expert_logit_table(base, bank, mixed.tokens)
    eval_set = eval_mixed if eval_mixed is not None else mixed
    eval_hidden, _ = base.forward(eval_set.tokens)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    report = RouterReport(trainable_params=params.param_count())
    n = len(mixed)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            h = hidden[idx]
            decision = route(h, params, "train", rng)
            task_logits = [table[e][i] for e, i in zip(decision.selected, idx)]
            parts = combined_loss(task_logits, mixed.y[idx], decision.noisy_logits,
                                  mixed.t[idx], config.lam, skip_undefined=True)
            if not np.isfinite(parts.total):
                raise TrainingDivergence("router loss became non-finite", report)
            grads = router_backward(h, params, decision.noise, parts.grad_router_logits)
            optimizer_step(params.params, grads, state, config.learning_rate, "adam",
                           ["w_gate", "b_gate", "w_noise"])
            sums += len(idx) * np.array([parts.total, parts.task, parts.router])
        report.train_loss.append(float(sums[0] / n))
        report.task_loss.append(float(sums[1] / n))
        report.router_loss.append(float(sums[2] / n))
        report.routing_accuracy.append(routing_accuracy(base, params, None, eval_set.t, eval_hidden))
    report.final_routing_accuracy = routing_accuracy(base, params, None, eval_set.t, eval_hidden)
    report.wall_clock_s = time.perf_counter() - start
    return params, report
