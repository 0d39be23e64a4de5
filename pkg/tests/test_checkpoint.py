import json

import numpy as np
import pytest

from ttmoe.checkpoint import (
    MAGIC,
    load_bank_manifest,
    load_expert,
    load_router,
    save_bank_manifest,
    save_expert,
    save_router,
)
from ttmoe.errors import CheckpointError
from ttmoe.model import ModelConfig, new_expert
from ttmoe.router import RouterParams
from ttmoe.tt import TtShape

CFG = ModelConfig()
Q_SHAPE = TtShape([8, 8], [8, 8], 3)
V_SHAPE = TtShape([8, 8], [4, 4], 3)


def trained_like(config=CFG, seed=0, num_classes=3):
    adapter = new_expert(config, Q_SHAPE, V_SHAPE, num_classes, seed=seed, alpha=2.5,
                         expert_id=seed, task_name=f"task{seed}")
    rng = np.random.default_rng(seed)
    for p in adapter.trainable_params():
        p[...] = rng.standard_normal(p.shape)
    return adapter


def assert_same(a, b):
    assert (a.expert_id, a.task_name, a.config_hash) == (b.expert_id, b.task_name, b.config_hash)
    for x, y in zip(a.trainable_params(), b.trainable_params()):
        assert x.dtype == y.dtype and np.array_equal(x, y)
    for x, y in zip(a.q_cores + a.v_cores, b.q_cores + b.v_cores):
        assert x.alpha == y.alpha and x.shape == y.shape
    assert np.array_equal(a.head.weight, b.head.weight)
    assert np.array_equal(a.head.bias, b.head.bias)


@pytest.mark.parametrize("precision", ["f32", "f64"])
def test_expert_round_trip_is_bit_exact(tmp_path, precision):
    config = ModelConfig(precision=precision)
    adapter = trained_like(config)
    save_expert(tmp_path / "e.ttx", adapter)
    back = load_expert(tmp_path / "e.ttx", config.config_hash(), precision)
    assert_same(adapter, back)


def test_file_is_little_endian_with_magic(tmp_path):
    adapter = trained_like()
    save_expert(tmp_path / "e.ttx", adapter)
    raw = (tmp_path / "e.ttx").read_bytes()
    assert raw.startswith(MAGIC + b"E\x01")
    first_core = adapter.q_cores[0].cores[0]
    assert first_core.astype("<f4").tobytes() in raw


def test_config_hash_mismatch_refused(tmp_path):
    save_expert(tmp_path / "e.ttx", trained_like())
    with pytest.raises(CheckpointError, match="base config"):
        load_expert(tmp_path / "e.ttx", ModelConfig(seed=1).config_hash())


def test_tampered_hash_refused(tmp_path):
    adapter = trained_like()
    save_expert(tmp_path / "e.ttx", adapter)
    raw = (tmp_path / "e.ttx").read_bytes()
    forged = raw.replace(adapter.config_hash.encode(), b"0" * len(adapter.config_hash))
    assert forged != raw
    (tmp_path / "e.ttx").write_bytes(forged)
    with pytest.raises(CheckpointError):
        load_expert(tmp_path / "e.ttx")


def test_flipped_payload_byte_refused(tmp_path):
    save_expert(tmp_path / "e.ttx", trained_like())
    raw = bytearray((tmp_path / "e.ttx").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "e.ttx").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_expert(tmp_path / "e.ttx")


@pytest.mark.parametrize("keep", [0, 5, 100, -1])
def test_truncated_file_refused(tmp_path, keep):
    save_expert(tmp_path / "e.ttx", trained_like())
    raw = (tmp_path / "e.ttx").read_bytes()
    (tmp_path / "e.ttx").write_bytes(raw[:keep])
    with pytest.raises(CheckpointError):
        load_expert(tmp_path / "e.ttx")


def test_version_mismatch_refused(tmp_path):
    save_expert(tmp_path / "e.ttx", trained_like())
    raw = bytearray((tmp_path / "e.ttx").read_bytes())
    raw[len(MAGIC) + 1] = 99
    (tmp_path / "e.ttx").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_expert(tmp_path / "e.ttx")


def test_cross_precision_load_is_explicit_error(tmp_path):
    save_expert(tmp_path / "e.ttx", trained_like(ModelConfig(precision="f64")))
    with pytest.raises(CheckpointError, match="refusing to cast"):
        load_expert(tmp_path / "e.ttx", precision="f32")


def test_wrong_kind_and_missing_file(tmp_path):
    save_router(tmp_path / "r.ttr", RouterParams.init(8, 2))
    with pytest.raises(CheckpointError, match="kind"):
        load_expert(tmp_path / "r.ttr")
    with pytest.raises(FileNotFoundError):
        load_expert(tmp_path / "missing.ttx")


def test_router_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = RouterParams(rng.standard_normal((8, 3)).astype(np.float32),
                          rng.standard_normal(3).astype(np.float32),
                          rng.standard_normal((8, 3)).astype(np.float32), ["a", "b", "c"], 0.5)
    save_router(tmp_path / "r.ttr", params)
    back = load_router(tmp_path / "r.ttr")
    assert back.expert_names == ["a", "b", "c"] and back.lam == 0.5
    for a, b in zip(params.params, back.params):
        assert a.dtype == b.dtype and np.array_equal(a, b)


def test_bank_manifest_round_trip_and_digest_check(tmp_path):
    experts = [trained_like(seed=s) for s in (0, 1)]
    paths = [tmp_path / "experts" / f"e{s}.ttx" for s in (0, 1)]
    paths[0].parent.mkdir()
    for p, e in zip(paths, experts):
        save_expert(p, e)
    save_bank_manifest(tmp_path / "bank.json", paths, experts)
    manifest = json.loads((tmp_path / "bank.json").read_text())
    assert manifest["schema_version"] == 1
    assert manifest["experts"][0]["path"] == "experts/e0.ttx"
    _, back = load_bank_manifest(tmp_path / "bank.json", CFG.config_hash())
    for a, b in zip(experts, back):
        assert_same(a, b)
    save_expert(paths[1], trained_like(seed=7))
    with pytest.raises(CheckpointError, match="digest"):
        load_bank_manifest(tmp_path / "bank.json")
