"""Synthetic classification tasks and the equal-share routing corpus.

Task ``i`` draws every token from its own vocabulary band, which is what makes
routing learnable from base-model features.  Each task splits its band into
token groups by a per-task rule; a sequence's label is the group it mostly
draws from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ttmoe.errors import ConfigError
from ttmoe.model import PAD, BaseModel, ModelConfig

RULES = ("lower-half-majority", "even-majority", "dominant-third")
MAX_BAND = 16


@dataclass
class TaskDataset:
    name: str
    tokens: np.ndarray  # [n, T], PAD-padded on the right
    labels: np.ndarray  # [n]
    num_classes: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int
    rule: str
    band: tuple[int, int] = (0, 0)

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "validation": self.val_idx, "val": self.val_idx}[which]
        return self.tokens[idx], self.labels[idx]

    def save(self, path) -> None:
        np.savez(
            path, tokens=self.tokens, labels=self.labels, train_idx=self.train_idx,
            val_idx=self.val_idx, num_classes=self.num_classes, seed=self.seed,
            name=np.array(self.name), rule=np.array(self.rule), band=np.array(self.band),
        )

    @classmethod
    def load(cls, path) -> "TaskDataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(str(z["name"]), z["tokens"], z["labels"], int(z["num_classes"]),
                       z["train_idx"], z["val_idx"], int(z["seed"]), str(z["rule"]),
                       tuple(int(v) for v in z["band"]))


@dataclass
class MixedDataset:
    tokens: np.ndarray
    y: np.ndarray
    t: np.ndarray
    task_names: list[str]
    num_classes: list[int]
    per_task: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)


def _token_groups(rule: str, band: tuple[int, int]) -> list[np.ndarray]:
    lo, hi = band
    ids = np.arange(lo, hi)
    if rule == "lower-half-majority":
        return [ids[ids >= lo + (hi - lo) // 2], ids[ids < lo + (hi - lo) // 2]]
    if rule == "even-majority":
        return [ids[ids % 2 == 1], ids[ids % 2 == 0]]
    return [ids[(ids - lo) % 3 == g] for g in range(3)]


def _sample_task(name, rule, band, n, t_max, rng):
    # Class c's sequences draw at least `share` of their tokens from group c;
    # the rest are spread uniformly over the whole band.
    groups = _token_groups(rule, band)
    num_classes = len(groups)
    share = 0.75 if num_classes == 2 else 0.7
    everything = np.arange(*band)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    tokens = np.full((n, t_max), PAD, dtype=np.int64)
    for i, y in enumerate(labels):
        length = int(rng.integers(t_max // 2, t_max + 1))
        k = math.ceil(share * length)
        others = np.setdiff1d(everything, groups[y])
        seq = np.concatenate([rng.choice(groups[y], k), rng.choice(others, length - k)])
        tokens[i, :length] = rng.permutation(seq)
    return tokens, labels.astype(np.int64), num_classes


def linear_probe_accuracy(model: BaseModel, task: TaskDataset, ridge: float = 1e-2) -> float:
    """Validation accuracy of a ridge-regression probe fit on frozen base features."""
    def features(tokens):
        h = model.forward(tokens)[0].astype(np.float64)
        return np.hstack([h, np.ones((len(h), 1))])

    xtr, ytr = task.split("train")
    xva, yva = task.split("validation")
    f_tr, f_va = features(xtr), features(xva)
    target = np.eye(task.num_classes)[ytr]
    gram = f_tr.T @ f_tr + ridge * np.eye(f_tr.shape[1])
    w = np.linalg.solve(gram, f_tr.T @ target)
    return float(np.mean(np.argmax(f_va @ w, axis=1) == yva))


def gen_synthetic_tasks(n_tasks: int, seed: int = 0, config: ModelConfig = ModelConfig(),
                        n_train: int = 240, n_val: int = 120, probe_min: float = 0.9,
                        max_attempts: int = 20, model: BaseModel | None = None) -> list[TaskDataset]:
    """Generate ``n_tasks`` probe-verified tasks on disjoint vocabulary bands."""
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    width = min(config.vocab // n_tasks, MAX_BAND)
    if width < 4:
        raise ConfigError(f"vocab {config.vocab} too small for {n_tasks} bands of >= 4 tokens")
    model = model or BaseModel(config)
    tasks = []
    for i in range(n_tasks):
        band = (i * width, (i + 1) * width)
        rule = RULES[i % len(RULES)]
        for attempt in range(max_attempts):
            task_seed = seed * 10_007 + i * 101 + attempt
            rng = np.random.default_rng(task_seed)
            n = n_train + n_val
            tokens, labels, c = _sample_task(f"task{i}", rule, band, n, config.max_len, rng)
            perm = rng.permutation(n)
            task = TaskDataset(f"task{i}", tokens, labels, c, np.sort(perm[:n_train]),
                               np.sort(perm[n_train:]), task_seed, rule, band)
            if linear_probe_accuracy(model, task) >= probe_min:
                break
        else:
            raise ConfigError(f"task {i} failed the linear-probe check {max_attempts} times")
        tasks.append(task)
    return tasks


def build_mixed(tasks: list[TaskDataset], per_task: int | str = "auto", seed: int = 0,
                split: str = "train", task_ids: list[int] | None = None) -> MixedDataset:
    """Pool an equal number of examples from every task and shuffle.

    ``task_ids`` gives the expert index carried as ``t`` for each task (default:
    list position).  ``auto`` takes the size of the smallest task's split.
    """
    if not tasks:
        raise ConfigError("need at least one task")
    sizes = [len(task.split(split)[1]) for task in tasks]
    if per_task == "auto":
        per_task = min(sizes)
    per_task = int(per_task)
    if per_task < 1 or per_task > min(sizes):
        raise ConfigError(f"per_task={per_task} exceeds the smallest task size {min(sizes)}")
    task_ids = list(range(len(tasks))) if task_ids is None else list(task_ids)
    t_max = max(task.tokens.shape[1] for task in tasks)
    toks, ys, ts = [], [], []
    for task, tid in zip(tasks, task_ids):
        x, y = task.split(split)
        x = np.pad(x[:per_task], ((0, 0), (0, t_max - x.shape[1])), constant_values=PAD)
        toks.append(x)
        ys.append(y[:per_task])
        ts.append(np.full(per_task, tid, dtype=np.int64))
    order = np.random.default_rng(seed).permutation(per_task * len(tasks))
    n_classes = [0] * (max(task_ids) + 1)
    names = [""] * (max(task_ids) + 1)
    for task, tid in zip(tasks, task_ids):
        n_classes[tid], names[tid] = task.num_classes, task.name
    return MixedDataset(np.concatenate(toks)[order], np.concatenate(ys)[order],
                        np.concatenate(ts)[order], names, n_classes, per_task, seed,
                        {"split": split})


def load_tasks(paths) -> list[TaskDataset]:
    return [TaskDataset.load(Path(p)) for p in paths]
