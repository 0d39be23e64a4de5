"""Latency of direct TT contraction versus reconstruct-then-multiply.

Each call is timed with ``time.perf_counter`` around the math only; array
allocation inside the call counts, input generation does not.  The full
update matrix is rebuilt on every reconstruction call.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from ttmoe.errors import ConfigError, CorrectnessError
from ttmoe.tt import TtCores, TtShape, tt_contract_forward, tt_reconstruct, validate_shape

MIN_REPS = 10
WARMUP = 3
AGREEMENT_RTOL = 1e-3


@dataclass
class BenchResult:
    batch_size: int
    reconstruction_median_s: float
    reconstruction_iqr_s: float
    contraction_median_s: float
    contraction_iqr_s: float
    speedup: float
    reps: int
    warmup: int
    d_in: int
    d_out: int
    input_factors: list[int]
    output_factors: list[int]
    rank: int
    max_rel_err: float

    def to_record(self) -> dict:
        return asdict(self)


def reconstruction_path(x, tt: TtCores) -> np.ndarray:
    return tt.alpha * (x @ tt_reconstruct(tt))


def contraction_path(x, tt: TtCores) -> np.ndarray:
    return tt_contract_forward(x, tt)


def _timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return time.perf_counter() - start, out


def _median_iqr(samples):
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(med), float(q3 - q1)


def bench_contract_vs_reconstruct(dims: tuple[int, int], shape: TtShape, batch_sizes,
                                  reps: int = MIN_REPS, warmup: int = WARMUP, alpha: float = 16.0,
                                  seed: int = 0, dtype=np.float32, threads: int | None = 1):
    """Median/IQR latencies per batch size; raises if the two paths disagree."""
    if reps < MIN_REPS:
        raise ConfigError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < WARMUP:
        raise ConfigError(f"need at least {WARMUP} warm-up calls, got {warmup}")
    batch_sizes = list(batch_sizes)
    if not batch_sizes or any(b < 1 for b in batch_sizes):
        raise ConfigError(f"batch sizes must be positive, got {batch_sizes}")
    validate_shape(shape, *dims)
    rng = np.random.default_rng(seed)
    # 1/sqrt(r) per core keeps dW entries O(1) regardless of chain length
    scale = 1.0 / np.sqrt(shape.rank)
    cores = [(scale * rng.standard_normal(cs)).astype(dtype) for cs in shape.core_shapes]
    tt = TtCores(shape, cores, alpha)
    results = []
    with threadpool_limits(limits=threads):
        for b in batch_sizes:
            x = rng.standard_normal((b, shape.d_in)).astype(dtype)
            for _ in range(warmup):
                reconstruction_path(x, tt)
                contraction_path(x, tt)
            rec, con = [], []
            err = 0.0
            for _ in range(reps):
                # alternate the paths so slow drift hits both equally
                t_rec, y_rec = _timed(reconstruction_path, x, tt)
                t_con, y_con = _timed(contraction_path, x, tt)
                rec.append(t_rec)
                con.append(t_con)
                ref = y_rec.astype(np.float64)
                err = max(err, float(np.max(np.abs(y_con - ref)) / max(np.max(np.abs(ref)), 1e-30)))
            if not err < AGREEMENT_RTOL:
                raise CorrectnessError(
                    f"batch {b}: contraction and reconstruction disagree (rel err {err:.2e})"
                )
            rec_med, rec_iqr = _median_iqr(rec)
            con_med, con_iqr = _median_iqr(con)
            results.append(BenchResult(b, rec_med, rec_iqr, con_med, con_iqr, rec_med / con_med,
                                       reps, warmup, shape.d_in, shape.d_out,
                                       list(shape.input_factors), list(shape.output_factors),
                                       shape.rank, err))
    return results
