"""Dense array primitives.

Arrays are plain row-major numpy ``ndarray`` objects.  float32 is the runtime
default; float64 is used where gradient checks need the headroom.
"""

from __future__ import annotations

import numpy as np

from ttmoe.errors import ShapeError

DEFAULT_DTYPE = np.float32
PRECISIONS = {"f32": np.float32, "f64": np.float64}


def precision_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, candidate in PRECISIONS.items():
        if np.dtype(candidate) == dtype:
            return name
    raise ValueError(f"unsupported precision {dtype}")


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Return a C-contiguous array of ``dtype``."""
    return np.ascontiguousarray(data, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for 2-D operands with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; ``-inf`` entries map to exactly zero.

    Raises ``ValueError`` if every entry along ``axis`` is ``-inf``.
    """
    v = np.asarray(v)
    top = np.max(v, axis=axis, keepdims=True)
    if np.any(np.isneginf(top)):
        raise ValueError("softmax needs at least one finite entry")
    e = np.exp(v - top)
    return e / np.sum(e, axis=axis, keepdims=True)


def softplus(x):
    """``log(1 + exp(x))``, returning ``x`` itself above 30."""
    x = np.asarray(x)
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return out.astype(x.dtype) if x.dtype.kind == "f" else out


def sigmoid(x):
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    The gradient is ``(softmax(logits) - one_hot(labels)) / B``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad
