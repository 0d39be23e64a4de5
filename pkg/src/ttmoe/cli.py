"""Command line entry point: ``ttmoe <subcommand> ...``.

Every subcommand prints a small table and, with ``--report PATH``, writes one
JSON object per line.  Timing values live under a ``timing`` key so the rest
of a record is reproducible for a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ttmoe import checkpoint
from ttmoe.bench import bench_contract_vs_reconstruct
from ttmoe.config import (
    list_presets,
    model_config,
    preset_path,
    read_config,
    resolve_seed,
    router_config,
    train_config,
)
from ttmoe.data import TaskDataset, build_mixed, gen_synthetic_tasks, load_tasks
from ttmoe.errors import CheckpointError, ConfigError, CorrectnessError, ShapeError, TrainingDivergence
from ttmoe.model import BaseModel, ModelConfig, count_trainable, new_expert, new_lora_adapter
from ttmoe.router import ExpertBank, moe_forward, router_param_count, train_router
from ttmoe.train import evaluate, train_expert
from ttmoe.tt import TtShape, lora_param_count, tt_param_count

SCHEMA_VERSION = 1
TIMING_KEYS = ("wall_clock_s", "reconstruction_median_s", "reconstruction_iqr_s",
               "contraction_median_s", "contraction_iqr_s", "speedup")


class UsageError(Exception):
    """Bad invocation: exit status 2."""


def _record(kind: str, payload: dict) -> dict:
    timing = {k: payload.pop(k) for k in TIMING_KEYS if k in payload}
    rec = {"schema_version": SCHEMA_VERSION, "kind": kind, **payload}
    if timing:
        rec["timing"] = timing
    return rec


def _emit(records, report: str | None) -> None:
    if report:
        with open(report, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _table(headers, rows) -> None:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(headers)]
    print("  ".join(str(h).ljust(w) for h, w in zip(headers, widths)))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _config_file(name) -> Path:
    """An INI path, or the name of a bundled preset."""
    if not Path(name).exists() and name in list_presets():
        return preset_path(name)
    return _require_file(name)


def _load_model_config(path) -> ModelConfig:
    return model_config(read_config(_config_file(path))) if path else ModelConfig()


# -- subcommands ---------------------------------------------------------------

def cmd_gen_tasks(args) -> list[dict]:
    seed = resolve_seed(args.seed) or 0
    cfg = _load_model_config(args.config)
    tasks = gen_synthetic_tasks(args.n_tasks, seed, cfg, n_train=args.n_train, n_val=args.n_val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, rows = [], []
    for task in tasks:
        path = out / f"{task.name}.npz"
        task.save(path)
        rows.append((task.name, task.rule, f"{task.band[0]}-{task.band[1] - 1}", task.num_classes,
                     len(task.train_idx), len(task.val_idx), path))
        records.append(_record("task", {"name": task.name, "rule": task.rule, "band": list(task.band),
                                        "num_classes": task.num_classes, "seed": task.seed,
                                        "n_train": len(task.train_idx), "n_val": len(task.val_idx),
                                        "path": str(path)}))
    _table(["task", "rule", "tokens", "classes", "train", "val", "path"], rows)
    return records


def _train_one(job):
    cfg_path, task_path, out_path, seed, expert_id = job
    parser = read_config(cfg_path)
    mcfg = model_config(parser)
    tcfg = train_config(parser, seed)
    if tcfg.method != "tt":
        raise ConfigError("train-expert writes TT checkpoints; use a method = tt config")
    base = BaseModel(mcfg)
    task = TaskDataset.load(task_path)
    adapter, report = train_expert(base, task, tcfg, expert_id)
    checkpoint.save_expert(out_path, adapter)
    return task.name, str(out_path), report


def cmd_train_expert(args) -> list[dict]:
    cfg_path = _config_file(args.config)
    task_paths = [_require_file(p) for p in args.task]
    seed = resolve_seed(args.seed)
    if len(task_paths) == 1 and not Path(args.out).is_dir() and not args.out.endswith("/"):
        outs = [Path(args.out)]
    else:
        folder = Path(args.out)
        folder.mkdir(parents=True, exist_ok=True)
        outs = [folder / f"{p.stem}.ttx" for p in task_paths]
    jobs = [(cfg_path, tp, op, seed, i) for i, (tp, op) in enumerate(zip(task_paths, outs))]
    if args.parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(job) for job in jobs]
    records, rows = [], []
    for name, path, rep in results:
        rows.append((name, rep.best_epoch, f"{rep.best_accuracy:.4f}", rep.trainable_params, path))
        records.append(_record("train_report", {"task": name, "checkpoint": path, **rep.to_record()}))
    _table(["task", "best_epoch", "val_acc", "params", "checkpoint"], rows)
    return records


def _load_bank(paths, config_hash):
    if len(paths) == 1 and paths[0].suffix == ".json":
        return checkpoint.load_bank_manifest(paths[0], config_hash)
    experts = [checkpoint.load_expert(p, config_hash) for p in paths]
    return paths, experts


def cmd_train_router(args) -> list[dict]:
    mixed_path = _require_file(args.mixed_config)
    bank_paths = [_require_file(p) for p in args.bank]
    parser = read_config(mixed_path)
    mcfg = _load_model_config(args.config) if args.config else model_config(parser)
    base = BaseModel(mcfg)
    paths, experts = _load_bank(bank_paths, mcfg.config_hash())
    bank = ExpertBank(experts)
    if not parser.has_option("mixed", "tasks"):
        raise ConfigError(f"{mixed_path}: [mixed] needs a 'tasks' list")
    task_files = [s.strip() for s in parser.get("mixed", "tasks").split(",") if s.strip()]
    task_files = [p if Path(p).is_absolute() else mixed_path.parent / p for p in task_files]
    tasks = load_tasks([_require_file(p) for p in task_files])
    try:
        ids = [bank.index_of(t.name) for t in tasks]
    except ValueError as exc:
        raise ConfigError(f"a task has no matching expert in the bank ({bank.names})") from exc
    per_task = parser.get("mixed", "per_task", fallback="auto")
    seed = resolve_seed(args.seed)
    mix_seed = seed if seed is not None else parser.getint("mixed", "seed", fallback=0)
    mixed = build_mixed(tasks, per_task, mix_seed, "train", ids)
    held_out = build_mixed(tasks, "auto", mix_seed, "validation", ids)
    rcfg = router_config(parser, seed)
    params, report = train_router(base, bank, mixed, rcfg, held_out)
    out = Path(args.out)
    checkpoint.save_router(out, params)
    manifest = out.with_suffix(".bank.json")
    checkpoint.save_bank_manifest(manifest, paths, experts)
    print(f"router: {params.n_experts} experts, {params.param_count()} trainable parameters")
    stride = max(1, len(report.train_loss) // 10)
    _table(["epoch", "loss", "routing_acc"],
           [(i + 1, f"{l:.4f}", f"{a:.4f}") for i, (l, a)
            in enumerate(zip(report.train_loss, report.routing_accuracy)) if (i + 1) % stride == 0])
    print(f"final held-out routing accuracy: {report.final_routing_accuracy:.4f}")
    return [_record("router_report", {"checkpoint": str(out), "bank_manifest": str(manifest),
                                      "experts": bank.names, **report.to_record()})]


def cmd_eval(args) -> list[dict]:
    mcfg = _load_model_config(args.config)
    base = BaseModel(mcfg)
    tasks = [TaskDataset.load(_require_file(p)) for p in args.task]
    records, rows = [], []
    if args.expert:
        adapter = checkpoint.load_expert(_require_file(args.expert), mcfg.config_hash())
        for task in tasks:
            x, y = task.split(args.split)
            acc = evaluate(base, adapter, x, y)
            rows.append((task.name, adapter.task_name, f"{acc:.4f}", "-"))
            records.append(_record("eval", {"mode": "expert", "task": task.name,
                                            "expert": adapter.task_name, "accuracy": acc}))
    else:
        if not args.bank:
            raise UsageError("--moe needs --bank")
        params = checkpoint.load_router(_require_file(args.moe))
        _, experts = _load_bank([_require_file(p) for p in args.bank], mcfg.config_hash())
        bank = ExpertBank(experts)
        for task in tasks:
            x, y = task.split(args.split)
            out = moe_forward(x, base, bank, params)
            acc = float(np.mean(out.predictions() == y)) if len(y) else 0.0
            expected = bank.index_of(task.name) if task.name in bank.names else -1
            route_acc = float(np.mean(out.decision.selected == expected)) if len(y) else 0.0
            rows.append((task.name, "moe", f"{acc:.4f}", f"{route_acc:.4f}"))
            records.append(_record("eval", {"mode": "moe", "task": task.name, "accuracy": acc,
                                            "routing_accuracy": route_acc}))
    _table(["task", "adapter", "accuracy", "routing_acc"], rows)
    return records


def _parse_int_list(text: str, sep=",") -> list[int]:
    try:
        return [int(v) for v in text.split(sep) if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected integers separated by {sep!r}, got {text!r}") from exc


def cmd_bench(args) -> list[dict]:
    dims = _parse_int_list(args.dims.lower().replace("x", ","))
    if len(dims) != 2:
        raise UsageError("--dims takes D_IN x D_OUT, e.g. 2048x2048")
    if ":" not in args.shape:
        raise UsageError("--shape takes IN_FACTORS:OUT_FACTORS, e.g. 16,8,4,4:4,4,8,16")
    left, right = args.shape.split(":", 1)
    shape = TtShape(_parse_int_list(left), _parse_int_list(right), args.rank)
    results = bench_contract_vs_reconstruct(tuple(dims), shape, _parse_int_list(args.batches),
                                            reps=args.reps, alpha=args.alpha,
                                            seed=resolve_seed(args.seed) or 0)
    print("timing: perf_counter around each forward call; reconstruction rebuilds dW per call")
    _table(["batch", "reconstruction_ms", "contraction_ms", "speedup"],
           [(r.batch_size, f"{1e3 * r.reconstruction_median_s:.3f}",
             f"{1e3 * r.contraction_median_s:.3f}", f"{r.speedup:.2f}x") for r in results])
    header = _record("bench_header", {"clock": "time.perf_counter", "threads": 1,
                                      "boundary": "per forward call, dW rebuilt every call"})
    return [header] + [_record("bench", r.to_record()) for r in results]


def _count_preset(name: str, config_path) -> dict:
    if name.startswith("paper-router-"):
        n = int(name.rsplit("-", 1)[1])
        return {"preset": name, "d": 2048, "n_experts": n, "parameters": router_param_count(2048, n)}
    if name == "custom":
        if not config_path:
            raise UsageError("--preset custom needs --config")
        parser = read_config(_config_file(config_path))
    else:
        parser = read_config(preset_path(name))
    mcfg = model_config(parser)
    tcfg = train_config(parser)
    if tcfg.method == "tt":
        adapter = new_expert(mcfg, tcfg.q_shape, tcfg.v_shape, 2, seed=0, alpha=tcfg.alpha)
        per_layer = {"q": tt_param_count(tcfg.q_shape), "v": tt_param_count(tcfg.v_shape)}
    else:
        adapter = new_lora_adapter(mcfg, tcfg.rank, 2, seed=0, alpha=tcfg.alpha)
        per_layer = {"q": lora_param_count(mcfg.d_model, mcfg.d_model, tcfg.rank),
                     "v": lora_param_count(mcfg.d_model, mcfg.d_v, tcfg.rank)}
    return {"preset": name, "method": tcfg.method, "n_layers": mcfg.n_layers,
            "per_layer": per_layer, "parameters": count_trainable(adapter)}


def cmd_count_params(args) -> list[dict]:
    info = _count_preset(args.preset, args.config)
    print(info["parameters"])
    return [_record("param_count", info)]


# -- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--report", help="write JSON-lines records here")
    common.add_argument("--seed", type=int, default=None, help="overrides TTMOE_SEED and config seeds")

    p = argparse.ArgumentParser(prog="ttmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-tasks", parents=[common], help="generate synthetic tasks")
    g.add_argument("--n-tasks", type=int, required=True)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="INI file with a [model] section")
    g.add_argument("--n-train", type=int, default=240)
    g.add_argument("--n-val", type=int, default=120)
    g.set_defaults(func=cmd_gen_tasks)

    t = sub.add_parser("train-expert", parents=[common], help="train TT-LoRA expert(s)")
    t.add_argument("--task", action="append", required=True)
    t.add_argument("--config", required=True, help="INI file or preset name")
    t.add_argument("--out", required=True, help="checkpoint file, or directory for several tasks")
    t.add_argument("--parallel", action="store_true")
    t.set_defaults(func=cmd_train_expert)

    r = sub.add_parser("train-router", parents=[common], help="train the router over frozen experts")
    r.add_argument("--bank", nargs="+", required=True, help="bank manifest (.json) or expert checkpoints")
    r.add_argument("--mixed-config", required=True)
    r.add_argument("--config", help="INI with [model]; defaults to the mixed config's [model]")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_train_router)

    e = sub.add_parser("eval", parents=[common], help="evaluate an expert or the MoE")
    which = e.add_mutually_exclusive_group(required=True)
    which.add_argument("--expert")
    which.add_argument("--moe", help="router checkpoint")
    e.add_argument("--bank", nargs="+")
    e.add_argument("--task", action="append", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="validation", choices=["train", "validation"])
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="contraction vs reconstruction latency")
    b.add_argument("--dims", default="2048x2048")
    b.add_argument("--shape", default="16,8,4,4:4,4,8,16")
    b.add_argument("--rank", type=int, default=5)
    b.add_argument("--alpha", type=float, default=16.0)
    b.add_argument("--batches", default="2,4,8,16,32,64,128")
    b.add_argument("--reps", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("count-params", parents=[common], help="trainable parameter counts")
    c.add_argument("--preset", required=True,
                   help=f"one of {', '.join(list_presets())}, paper-router-N, custom")
    c.add_argument("--config", help="INI file for --preset custom")
    c.set_defaults(func=cmd_count_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        records = args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"ttmoe: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ShapeError, CorrectnessError, TrainingDivergence,
            IndexError, ValueError) as exc:
        print(f"ttmoe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    _emit(records, args.report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
