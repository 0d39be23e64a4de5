"""Frozen toy transformer whose Query and Value projections take adapter deltas.

The base is a pre-norm causal decoder with fixed random weights.  Value uses
fewer heads than Query/Key (``d_v < d``), so one value head is shared by a
group of query heads.  Sequences are padded on the right with ``PAD``; the
pooled representation is the final-layer state of the last real token.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ttmoe.errors import ConfigError, ShapeError
from ttmoe.tensor import PRECISIONS, matmul, softmax
from ttmoe.tt import LoraFactors, TtCores, TtShape, init_cores, validate_shape

PAD = -1
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d_model: int = 64
    d_v: int = 16
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 16
    d_ff: int = 128
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not self.d_v < self.d_model:
            raise ConfigError("d_v must be smaller than d_model")
        hd = self.head_dim
        if self.d_v % hd or self.n_heads % (self.d_v // hd):
            raise ConfigError("d_v must be a whole number of heads that divides n_heads")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_value_heads(self) -> int:
        return self.d_v // self.head_dim

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def digest(arrays) -> str:
    """sha256 over dtype, shape, and raw bytes of each array in order."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(f"{a.dtype.str}{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Head:
    weight: np.ndarray  # [d, C]
    bias: np.ndarray  # [C]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


def init_head(d: int, num_classes: int, seed: int, dtype=np.float32) -> Head:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)
    w = rng.uniform(-bound, bound, (d, num_classes)).astype(dtype)
    b = rng.uniform(-bound, bound, num_classes).astype(dtype)
    return Head(_frozen(w), _frozen(b))


def head_forward(hidden, head: Head) -> np.ndarray:
    hidden = np.asarray(hidden)
    if hidden.ndim != 2 or hidden.shape[1] != head.weight.shape[0]:
        raise ShapeError(f"hidden {hidden.shape} does not fit head {head.weight.shape}")
    # Explicit reduction instead of BLAS: a row's logits must not depend on how
    # many rows share the call (gemv vs gemm round differently).
    return np.sum(hidden[:, :, None] * head.weight[None], axis=1) + head.bias


@dataclass
class ExpertAdapter:
    """Per-layer Q/V tensor-train cores plus a frozen classification head."""

    expert_id: int
    task_name: str
    q_cores: list[TtCores]
    v_cores: list[TtCores]
    head: Head
    config_hash: str = ""

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def deltas(self):
        return list(zip(self.q_cores, self.v_cores))

    def trainable_params(self) -> list[np.ndarray]:
        return [p for q, v in self.deltas for p in q.params + v.params]

    def copy(self) -> "ExpertAdapter":
        return ExpertAdapter(self.expert_id, self.task_name, [c.copy() for c in self.q_cores],
                             [c.copy() for c in self.v_cores], self.head, self.config_hash)


@dataclass
class LoraAdapter:
    """Baseline: per-layer (A, B) factors on Q and V, plus a frozen head."""

    expert_id: int
    task_name: str
    q_factors: list[LoraFactors]
    v_factors: list[LoraFactors]
    head: Head
    config_hash: str = ""

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def deltas(self):
        return list(zip(self.q_factors, self.v_factors))

    def trainable_params(self) -> list[np.ndarray]:
        return [p for q, v in self.deltas for p in q.params + v.params]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.expert_id, self.task_name, [f.copy() for f in self.q_factors],
                           [f.copy() for f in self.v_factors], self.head, self.config_hash)


def new_expert(config: ModelConfig, q_shape: TtShape, v_shape: TtShape, num_classes: int,
               seed: int, alpha: float = 1.0, std: float = 0.02, expert_id: int = 0,
               task_name: str = "") -> ExpertAdapter:
    validate_shape(q_shape, config.d_model, config.d_model)
    validate_shape(v_shape, config.d_model, config.d_v)
    dtype = config.dtype
    q = [init_cores(q_shape, seed * 1000 + 2 * i, std, alpha, dtype) for i in range(config.n_layers)]
    v = [init_cores(v_shape, seed * 1000 + 2 * i + 1, std, alpha, dtype) for i in range(config.n_layers)]
    head = init_head(config.d_model, num_classes, seed + 7919, dtype)
    return ExpertAdapter(expert_id, task_name, q, v, head, config.config_hash())


def new_lora_adapter(config: ModelConfig, rank: int, num_classes: int, seed: int,
                     alpha: float = 1.0, std: float = 0.02, expert_id: int = 0,
                     task_name: str = "") -> LoraAdapter:
    d, dv, dtype = config.d_model, config.d_v, config.dtype
    q = [LoraFactors.init(d, d, rank, seed * 1000 + 2 * i, alpha, std, dtype) for i in range(config.n_layers)]
    v = [LoraFactors.init(d, dv, rank, seed * 1000 + 2 * i + 1, alpha, std, dtype) for i in range(config.n_layers)]
    head = init_head(d, num_classes, seed + 7919, dtype)
    return LoraAdapter(expert_id, task_name, q, v, head, config.config_hash())


def count_trainable(adapter) -> int:
    """Adapter parameters only; the head and the base are excluded."""
    return sum(q.param_count() + v.param_count() for q, v in adapter.deltas)


def adapted_linear_forward(x, w0, delta=None) -> np.ndarray:
    out = matmul(x, w0)
    if delta is not None:
        out = out + delta.forward(x)
    return out


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layer_norm_backward(y, inv, dy):
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


class BaseModel:
    """Fixed-seed random decoder; every weight array is read-only."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        dt = c.dtype

        def normal(shape, fan_in, gain=1.0):
            return _frozen((gain * rng.standard_normal(shape) / math.sqrt(fan_in)).astype(dt))

        # residual-branch outputs scaled by 1/sqrt(2L), as in GPT-2 initialization
        branch = 1.0 / math.sqrt(2 * c.n_layers)

        self.embed = normal((c.vocab, c.d_model), 1)
        self.pos = normal((c.max_len, c.d_model), 4)
        self.layers = []
        for _ in range(c.n_layers):
            self.layers.append({
                "wq": normal((c.d_model, c.d_model), c.d_model),
                "wk": normal((c.d_model, c.d_model), c.d_model),
                "wv": normal((c.d_model, c.d_v), c.d_model),
                "wo": normal((c.d_model, c.d_model), c.d_model, branch),
                "w1": normal((c.d_model, c.d_ff), c.d_model),
                "w2": normal((c.d_ff, c.d_model), c.d_ff, branch),
            })
        mask = np.triu(np.ones((c.max_len, c.max_len), dtype=bool), k=1)
        self._causal = mask
        self._value_head = np.arange(c.n_heads) // (c.n_heads // c.n_value_heads)

    def weights(self) -> list[np.ndarray]:
        out = [self.embed, self.pos]
        for layer in self.layers:
            out.extend(layer[k] for k in sorted(layer))
        return out

    def weights_digest(self) -> str:
        return digest(self.weights())

    def _check_tokens(self, tokens) -> tuple[np.ndarray, np.ndarray]:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.dtype.kind not in "iu":
            raise ShapeError(f"tokens must be a 2-D integer array, got {tokens.shape} {tokens.dtype}")
        if tokens.shape[1] > self.config.max_len:
            raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        real = tokens != PAD
        if np.any((tokens < 0) & real) or np.any(tokens >= self.config.vocab):
            raise IndexError(f"token ids must lie in [0, {self.config.vocab}) or be PAD")
        lengths = real.sum(axis=1)
        if tokens.shape[0] and np.any(lengths == 0):
            raise ShapeError("every sequence needs at least one real token")
        # padding must be trailing: the first `length` positions are all real
        if np.any(real != (np.arange(tokens.shape[1]) < lengths[:, None])):
            raise ShapeError("padding must follow the real tokens")
        return tokens, lengths

    def _run(self, tokens, deltas, keep):
        c = self.config
        tokens, lengths = self._check_tokens(tokens)
        # Always run at max_len: identical kernel shapes keep results bit-stable
        # regardless of how much padding the caller supplied.
        b, t = tokens.shape[0], c.max_len
        tokens = np.pad(tokens, ((0, 0), (0, t - tokens.shape[1])), constant_values=PAD)
        hd, nh = c.head_dim, c.n_heads
        scale = 1.0 / math.sqrt(hd)
        emb = np.where((tokens == PAD)[..., None], 0.0, self.embed[np.maximum(tokens, 0)])
        x = (emb + self.pos[:t]).astype(c.dtype)
        mask = self._causal[:t, :t]
        cache = []
        for i, w in enumerate(self.layers):
            dq_delta, dv_delta = deltas[i] if deltas else (None, None)
            a, inv1 = _layer_norm(x)
            a2, inv1 = a.reshape(b * t, c.d_model), inv1.reshape(b * t, 1)
            q = adapted_linear_forward(a2, w["wq"], dq_delta)
            k = a2 @ w["wk"]
            v = adapted_linear_forward(a2, w["wv"], dv_delta)
            qh = q.reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
            kh = k.reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
            vh = v.reshape(b, t, c.n_value_heads, hd).transpose(0, 2, 1, 3)[:, self._value_head]
            scores = np.where(mask, -np.inf, (qh @ kh.transpose(0, 1, 3, 2)) * scale)
            probs = softmax(scores).astype(c.dtype)
            o = (probs @ vh).transpose(0, 2, 1, 3).reshape(b * t, c.d_model)
            x = x + (o @ w["wo"]).reshape(b, t, c.d_model)
            f_in, inv2 = _layer_norm(x)
            f2, inv2 = f_in.reshape(b * t, c.d_model), inv2.reshape(b * t, 1)
            pre = f2 @ w["w1"]
            act = np.maximum(pre, 0)
            x = x + (act @ w["w2"]).reshape(b, t, c.d_model)
            if keep:
                cache.append((a2, inv1, qh, kh, vh, probs, o, f2, inv2, pre, act))
        final, inv_f = _layer_norm(x)
        rows = np.arange(b)
        hidden = final[rows, lengths - 1]
        return hidden, (cache, final, inv_f, lengths, b, t)

    def forward(self, tokens, adapter=None) -> tuple[np.ndarray, np.ndarray | None]:
        """Return ``(hidden [B, d], logits [B, C] or None)``."""
        deltas = adapter.deltas if adapter is not None else None
        hidden, _ = self._run(tokens, deltas, keep=False)
        logits = head_forward(hidden, adapter.head) if adapter is not None else None
        return hidden, logits

    def forward_backward(self, tokens, adapter, grad_logits):
        """Logits and the gradients of ``sum(grad_logits * logits)`` w.r.t. adapter params.

        ``grad_logits`` may be a callable mapping the logits to that gradient.
        Gradients come back in the order of ``adapter.trainable_params()``.
        """
        c = self.config
        hidden, (cache, final, inv_f, lengths, b, t) = self._run(tokens, adapter.deltas, keep=True)
        logits = head_forward(hidden, adapter.head)
        if callable(grad_logits):
            grad_logits = grad_logits(logits)
        d_hidden = grad_logits @ adapter.head.weight.T
        d_final = np.zeros_like(final)
        d_final[np.arange(b), lengths - 1] = d_hidden
        dx = _layer_norm_backward(final, inv_f, d_final)
        hd, nh = c.head_dim, c.n_heads
        scale = 1.0 / math.sqrt(hd)
        per_layer = [None] * c.n_layers
        for i in range(c.n_layers - 1, -1, -1):
            w = self.layers[i]
            q_delta, v_delta = adapter.deltas[i]
            a2, inv1, qh, kh, vh, probs, o, f2, inv2, pre, act = cache[i]
            dx2 = dx.reshape(b * t, c.d_model)
            d_pre = (dx2 @ w["w2"].T) * (pre > 0)
            d_f2 = d_pre @ w["w1"].T
            dx = dx + _layer_norm_backward(f2, inv2, d_f2).reshape(b, t, c.d_model)

            dx2 = dx.reshape(b * t, c.d_model)
            do = (dx2 @ w["wo"].T).reshape(b, t, nh, hd).transpose(0, 2, 1, 3)
            d_probs = do @ vh.transpose(0, 1, 3, 2)
            d_vh = probs.transpose(0, 1, 3, 2) @ do
            d_scores = probs * (d_probs - np.sum(d_probs * probs, axis=-1, keepdims=True)) * scale
            d_qh = d_scores @ kh
            d_kh = d_scores.transpose(0, 1, 3, 2) @ qh
            d_v_heads = np.zeros((b, c.n_value_heads, t, hd), dtype=d_vh.dtype)
            np.add.at(d_v_heads, (slice(None), self._value_head), d_vh)
            dq = d_qh.transpose(0, 2, 1, 3).reshape(b * t, c.d_model)
            dk = d_kh.transpose(0, 2, 1, 3).reshape(b * t, c.d_model)
            dv = d_v_heads.transpose(0, 2, 1, 3).reshape(b * t, c.d_v)
            q_grads, dq_x = q_delta.backward(a2, dq)
            v_grads, dv_x = v_delta.backward(a2, dv)
            da = dq @ w["wq"].T + dk @ w["wk"].T + dv @ w["wv"].T + dq_x + dv_x
            dx = dx + _layer_norm_backward(a2, inv1, da).reshape(b, t, c.d_model)
            per_layer[i] = q_grads + v_grads
        grads = [g for layer in per_layer for g in layer]
        return logits, grads


def base_forward(model: BaseModel, tokens, adapter=None):
    return model.forward(tokens, adapter)
