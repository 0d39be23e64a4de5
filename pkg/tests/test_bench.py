import numpy as np
import pytest

from ttmoe import bench
from ttmoe.bench import bench_contract_vs_reconstruct
from ttmoe.errors import ConfigError, CorrectnessError, ShapeError
from ttmoe.tt import TtShape

SMALL = TtShape([4, 4], [4, 4], 2)
Q_SHAPE = TtShape([16, 8, 4, 4], [4, 4, 8, 16], 5)


def test_batch_zero_rejected():
    with pytest.raises(ConfigError):
        bench_contract_vs_reconstruct((16, 16), SMALL, [0])


def test_too_few_reps_or_warmups_rejected():
    with pytest.raises(ConfigError):
        bench_contract_vs_reconstruct((16, 16), SMALL, [2], reps=9)
    with pytest.raises(ConfigError):
        bench_contract_vs_reconstruct((16, 16), SMALL, [2], warmup=2)


def test_dims_must_match_shape():
    with pytest.raises(ShapeError):
        bench_contract_vs_reconstruct((16, 15), SMALL, [2])


def test_divergent_paths_are_refused(monkeypatch):
    monkeypatch.setattr(bench, "contraction_path", lambda x, tt: np.zeros((len(x), 16), np.float32))
    with pytest.raises(CorrectnessError):
        bench_contract_vs_reconstruct((16, 16), SMALL, [2])


def test_result_fields():
    (r,) = bench_contract_vs_reconstruct((16, 16), SMALL, [3], reps=10)
    assert r.batch_size == 3 and r.reps == 10 and r.warmup == 3
    assert r.max_rel_err < 1e-3
    assert r.speedup == pytest.approx(r.reconstruction_median_s / r.contraction_median_s)
    rec = r.to_record()
    assert rec["input_factors"] == [4, 4] and rec["rank"] == 2


def test_repeat_runs_are_stable():
    runs = [bench_contract_vs_reconstruct((2048, 2048), Q_SHAPE, [16], reps=20)[0] for _ in range(2)]
    for attr in ("reconstruction_median_s", "contraction_median_s"):
        a, b = (getattr(r, attr) for r in runs)
        assert abs(a - b) / max(a, b) <= 0.2, (attr, a, b)
