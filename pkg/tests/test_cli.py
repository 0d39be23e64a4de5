import json

import pytest

from ttmoe.cli import main
from ttmoe.config import SEED_ENV

FAST_INI = """
[train]
max_epochs = 20
patience = 5
"""

MIXED_INI = """
[mixed]
tasks = tasks/task0.npz, tasks/task1.npz
per_task = auto

[router]
epochs = 5
"""


def read_records(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.mark.parametrize("preset,expected", [
    ("paper-tt", "33920"), ("paper-lora", "1703936"), ("paper-router-2", "8194"),
    ("paper-router-3", "12291"), ("paper-router-4", "16388"), ("paper-router-5", "20485"),
    ("paper-router-6", "24582"), ("paper-router-17", "69649"),
])
def test_count_params_presets(capsys, preset, expected):
    assert main(["count-params", "--preset", preset]) == 0
    assert capsys.readouterr().out.strip() == expected


def test_count_params_custom_and_report(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nd_model = 64\n[train]\nrank = 2\n")
    assert main(["count-params", "--preset", "custom", "--config", str(ini),
                 "--report", str(tmp_path / "r.jsonl")]) == 0
    # q: 16+32+32+16, v: 16+32+16+8 per layer, two layers
    assert capsys.readouterr().out.strip() == str(2 * (96 + 72))
    (rec,) = read_records(tmp_path / "r.jsonl")
    assert rec["schema_version"] == 1 and rec["parameters"] == 336


def test_missing_checkpoint_exits_2_with_path(tmp_path, capsys):
    missing = tmp_path / "nope.ttx"
    code = main(["eval", "--expert", str(missing), "--task", str(tmp_path / "t.npz")])
    err = capsys.readouterr().err
    assert code == 2
    assert str(tmp_path) in err and len(err.strip().splitlines()) == 1


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["bench", "--frobnicate"])
    assert info.value.code == 2


def test_other_failures_are_nonzero_one_line(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[train]\nnot_a_key = 1\n")
    assert main(["count-params", "--preset", "custom", "--config", str(ini)]) == 1
    err = capsys.readouterr().err
    assert "not_a_key" in err and len(err.strip().splitlines()) == 1


def test_bench_command(tmp_path, capsys):
    report = tmp_path / "b.jsonl"
    assert main(["bench", "--dims", "16x16", "--shape", "4,4:4,4", "--rank", "2",
                 "--batches", "1,2", "--report", str(report)]) == 0
    records = read_records(report)
    assert records[0]["kind"] == "bench_header"
    assert [r["batch_size"] for r in records[1:]] == [1, 2]
    assert "contraction_median_s" in records[1]["timing"]


def run_pipeline(workdir, seed, monkeypatch):
    monkeypatch.chdir(workdir)
    (workdir / "fast.ini").write_text(FAST_INI)
    (workdir / "mixed.ini").write_text(MIXED_INI)
    steps = [
        ["gen-tasks", "--n-tasks", "2", "--out", "tasks", "--report", "gen.jsonl"],
        ["train-expert", "--task", "tasks/task0.npz", "--task", "tasks/task1.npz",
         "--config", "fast.ini", "--out", "experts", "--report", "train.jsonl"],
        ["train-router", "--bank", "experts/task0.ttx", "experts/task1.ttx",
         "--mixed-config", "mixed.ini", "--out", "router.ttr", "--report", "router.jsonl"],
        ["eval", "--moe", "router.ttr", "--bank", "router.bank.json",
         "--task", "tasks/task0.npz", "--task", "tasks/task1.npz", "--report", "eval.jsonl"],
    ]
    for argv in steps:
        assert main(argv + ["--seed", str(seed)]) == 0, argv
    out = {}
    for name in ("gen", "train", "router", "eval"):
        records = read_records(workdir / f"{name}.jsonl")
        for r in records:
            r.pop("timing", None)
        out[name] = records
    out["router.ttr"] = (workdir / "router.ttr").read_bytes()
    return out


def test_end_to_end_reproducible(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    first = run_pipeline(a, 11, monkeypatch)
    second = run_pipeline(b, 11, monkeypatch)
    assert first == second
    assert all(r["accuracy"] >= 0.9 for r in first["eval"])
    assert all(r["schema_version"] == 1 for r in first["train"])


def test_env_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "4")
    assert main(["gen-tasks", "--n-tasks", "1", "--out", str(tmp_path / "env"),
                 "--report", str(tmp_path / "env.jsonl")]) == 0
    monkeypatch.delenv(SEED_ENV)
    assert main(["gen-tasks", "--n-tasks", "1", "--out", str(tmp_path / "flag"), "--seed", "4",
                 "--report", str(tmp_path / "flag.jsonl")]) == 0
    env = (tmp_path / "env" / "task0.npz").read_bytes()
    assert env == (tmp_path / "flag" / "task0.npz").read_bytes()
    assert read_records(tmp_path / "env.jsonl")[0]["seed"] == 4 * 10_007
