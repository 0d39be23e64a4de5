"""Tensor-train adapters applied by direct input contraction.

A weight update ``dW`` of shape ``[d_in, d_out]`` is stored as a chain of
3-way cores ``G_k[r_{k-1}, f_k, r_k]`` where ``f`` runs over the input factors
``m_1..m_p`` followed by the output factors ``n_1..n_q`` and the bond ranks
are ``[1, r, ..., r, 1]``.

``tt_contract_forward`` pushes a batch through the chain one core at a time,
strictly left to right, and never forms ``dW``.  ``tt_reconstruct`` builds
``dW`` explicitly and exists as an oracle and benchmark baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ttmoe.errors import ConfigError, ShapeError
from ttmoe.tensor import DEFAULT_DTYPE


@dataclass(frozen=True)
class TtShape:
    input_factors: tuple[int, ...]
    output_factors: tuple[int, ...]
    rank: int

    def __post_init__(self):
        object.__setattr__(self, "input_factors", tuple(int(m) for m in self.input_factors))
        object.__setattr__(self, "output_factors", tuple(int(n) for n in self.output_factors))
        if not self.input_factors or not self.output_factors:
            raise ConfigError("need at least one input and one output factor")
        if any(f < 2 for f in self.factors):
            raise ConfigError(f"all factors must be >= 2, got {list(self.factors)}")
        if int(self.rank) < 1:
            raise ConfigError(f"rank must be positive, got {self.rank}")
        object.__setattr__(self, "rank", int(self.rank))

    @property
    def factors(self) -> tuple[int, ...]:
        return self.input_factors + self.output_factors

    @property
    def d_in(self) -> int:
        return math.prod(self.input_factors)

    @property
    def d_out(self) -> int:
        return math.prod(self.output_factors)

    @property
    def ranks(self) -> list[int]:
        n_cores = len(self.factors)
        return [1] + [self.rank] * (n_cores - 1) + [1]

    @property
    def core_shapes(self) -> list[tuple[int, int, int]]:
        r = self.ranks
        return [(r[k], f, r[k + 1]) for k, f in enumerate(self.factors)]


@dataclass
class TtCores:
    shape: TtShape
    cores: list[np.ndarray]
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        expected = self.shape.core_shapes
        if len(self.cores) != len(expected):
            raise ShapeError(f"expected {len(expected)} cores, got {len(self.cores)}")
        for k, (core, want) in enumerate(zip(self.cores, expected)):
            if core.shape != want:
                raise ShapeError(f"core {k} has shape {core.shape}, expected {want}")

    @property
    def dtype(self):
        return self.cores[0].dtype

    @property
    def params(self) -> list[np.ndarray]:
        return self.cores

    def copy(self) -> "TtCores":
        return TtCores(self.shape, [c.copy() for c in self.cores], self.alpha)

    def forward(self, x):
        return tt_contract_forward(x, self)

    def backward(self, x, upstream):
        return tt_contract_backward(x, self, upstream)

    def param_count(self) -> int:
        return tt_param_count(self.shape)


def validate_shape(shape: TtShape, d_in: int, d_out: int) -> None:
    """Raise ``ShapeError`` unless ``shape`` factorizes a ``d_in x d_out`` matrix."""
    if shape.d_in != d_in:
        raise ShapeError(
            f"input factors {list(shape.input_factors)} multiply to {shape.d_in}, expected {d_in}"
        )
    if shape.d_out != d_out:
        raise ShapeError(
            f"output factors {list(shape.output_factors)} multiply to {shape.d_out}, expected {d_out}"
        )


def init_cores(shape: TtShape, seed: int, std: float = 0.02, alpha: float = 1.0,
               dtype=DEFAULT_DTYPE) -> TtCores:
    """Gaussian cores with an all-zero last core, so the initial update is zero."""
    rng = np.random.default_rng(seed)
    cores = []
    core_shapes = shape.core_shapes
    for k, cs in enumerate(core_shapes):
        if k == len(core_shapes) - 1:
            cores.append(np.zeros(cs, dtype=dtype))
        else:
            cores.append((std * rng.standard_normal(cs)).astype(dtype))
    return TtCores(shape, cores, alpha)


def _check_input(x, tt: TtCores) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != tt.shape.d_in:
        raise ShapeError(f"input {x.shape} incompatible with d_in={tt.shape.d_in}")
    return x


def _forward_states(x: np.ndarray, tt: TtCores) -> list[np.ndarray]:
    # Input stage keeps the state as [B, r_{k-1} * m_k, rest] so each step is a
    # batched (r_k x r_{k-1} m_k) @ (r_{k-1} m_k x rest) product.  Output stage
    # keeps it as [B, n_1..n_{i-1}, r] and appends n_i before the new rank.
    b = x.shape[0]
    p = len(tt.shape.input_factors)
    states = [x]
    s = x
    rest = tt.shape.d_in
    for k in range(p):
        r_prev, m, r_next = tt.cores[k].shape
        rest //= m
        s = s.reshape(b, r_prev * m, rest)
        g = tt.cores[k].reshape(r_prev * m, r_next)
        s = np.matmul(g.T, s)
        states.append(s)
    s = s.reshape(b, 1, tt.cores[p].shape[0])
    states[-1] = s
    for core in tt.cores[p:]:
        r_prev, n, r_next = core.shape
        s = np.matmul(s, core.reshape(r_prev, n * r_next))
        s = s.reshape(b, -1, r_next)
        states.append(s)
    return states


def tt_contract_forward(x, tt: TtCores) -> np.ndarray:
    """``alpha * x @ dW`` computed core by core; ``x`` is ``[B, d_in]``."""
    x = _check_input(x, tt)
    if x.shape[0] == 0:
        return np.zeros((0, tt.shape.d_out), dtype=np.result_type(x, tt.dtype))
    y = _forward_states(x, tt)[-1]
    return tt.alpha * y.reshape(x.shape[0], tt.shape.d_out)


def tt_contract_backward(x, tt: TtCores, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * tt_contract_forward(x, tt))``.

    Returns ``(core_grads, x_grad)`` with ``core_grads[k]`` shaped like core ``k``.
    """
    x = _check_input(x, tt)
    upstream = np.asarray(upstream)
    b = x.shape[0]
    if upstream.shape != (b, tt.shape.d_out):
        raise ShapeError(f"upstream {upstream.shape} does not match output ({b}, {tt.shape.d_out})")
    if b == 0:
        return [np.zeros_like(c) for c in tt.cores], np.zeros_like(x)
    p = len(tt.shape.input_factors)
    states = _forward_states(x, tt)
    grads: list[np.ndarray] = [None] * len(tt.cores)

    ds = (tt.alpha * upstream).reshape(states[-1].shape)
    for k in range(len(tt.cores) - 1, p - 1, -1):
        r_prev, n, r_next = tt.cores[k].shape
        h = tt.cores[k].reshape(r_prev, n * r_next)
        s_prev = states[k]
        ds = ds.reshape(b, s_prev.shape[1], n * r_next)
        grads[k] = np.einsum("bjr,bjc->rc", s_prev, ds).reshape(r_prev, n, r_next)
        ds = np.matmul(ds, h.T)

    # states[p] has the output-stage layout [B, 1, r_p]; the input stage
    # produced [B, r_p, 1], which holds the same numbers.
    rest = 1
    for k in range(p - 1, -1, -1):
        r_prev, m, r_next = tt.cores[k].shape
        ds = ds.reshape(b, r_next, rest)
        s_prev = states[k].reshape(b, r_prev * m, rest)
        g = tt.cores[k].reshape(r_prev * m, r_next)
        grads[k] = np.einsum("bir,bjr->ij", s_prev, ds).reshape(r_prev, m, r_next)
        ds = np.matmul(g, ds)
        rest *= m
    return grads, ds.reshape(b, tt.shape.d_in)


def tt_reconstruct(tt: TtCores) -> np.ndarray:
    """Full ``[d_in, d_out]`` update matrix (without ``alpha``)."""
    acc = np.ones((1, 1), dtype=tt.dtype)
    for core in tt.cores:
        r_prev, f, r_next = core.shape
        acc = (acc @ core.reshape(r_prev, f * r_next)).reshape(-1, r_next)
    return acc.reshape(tt.shape.d_in, tt.shape.d_out)


def tt_param_count(shape: TtShape) -> int:
    return sum(a * f * b for a, f, b in shape.core_shapes)


def lora_param_count(d_in: int, d_out: int, r: int) -> int:
    if r < 1:
        raise ConfigError(f"rank must be positive, got {r}")
    return r * d_in + d_out * r


@dataclass
class LoraFactors:
    """Baseline low-rank update ``alpha * x @ A.T @ B.T``; ``B`` starts at zero."""

    a: np.ndarray  # [r, d_in]
    b: np.ndarray  # [d_out, r]
    alpha: float = 1.0
    rank: int = field(init=False)

    def __post_init__(self):
        if self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"A {self.a.shape} and B {self.b.shape} disagree on rank")
        self.rank = self.a.shape[0]

    @classmethod
    def init(cls, d_in, d_out, rank, seed, alpha=1.0, std=0.02, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        a = (std * rng.standard_normal((rank, d_in))).astype(dtype)
        return cls(a, np.zeros((d_out, rank), dtype=dtype), alpha)

    @property
    def params(self):
        return [self.a, self.b]

    def copy(self):
        return LoraFactors(self.a.copy(), self.b.copy(), self.alpha)

    def forward(self, x):
        return self.alpha * ((x @ self.a.T) @ self.b.T)

    def backward(self, x, upstream):
        du = self.alpha * upstream
        low = x @ self.a.T
        grad_b = du.T @ low
        d_low = du @ self.b
        grad_a = d_low.T @ x
        return [grad_a, grad_b], d_low @ self.a

    def param_count(self) -> int:
        return lora_param_count(self.a.shape[1], self.b.shape[0], self.rank)
