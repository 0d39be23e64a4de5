"""Cached end-to-end toy pipelines shared by the integration and acceptance tests."""

import functools
from dataclasses import dataclass

from ttmoe.data import MixedDataset, TaskDataset, build_mixed, gen_synthetic_tasks
from ttmoe.model import BaseModel, ExpertAdapter, ModelConfig
from ttmoe.router import ExpertBank, RouterParams, RouterConfig, RouterReport, train_router
from ttmoe.train import TrainConfig, TrainReport, train_expert


@dataclass
class Suite:
    base: BaseModel
    tasks: list[TaskDataset]
    experts: list[ExpertAdapter]
    expert_reports: list[TrainReport]
    bank: ExpertBank
    params: RouterParams
    router_report: RouterReport
    held_out: MixedDataset
    base_digest_before_experts: str
    base_digest_after_experts: str
    base_digest_after_router: str
    bank_digests_before: list[str]
    bank_digests_after: list[str]


@functools.lru_cache(maxsize=None)
def suite(n_tasks: int, seed: int = 0) -> Suite:
    base = BaseModel(ModelConfig())
    tasks = gen_synthetic_tasks(n_tasks, seed, base.config, model=base)
    before = base.weights_digest()
    experts, reports = [], []
    for i, task in enumerate(tasks):
        adapter, report = train_expert(base, task, TrainConfig(seed=seed + i), expert_id=i)
        experts.append(adapter)
        reports.append(report)
    after_experts = base.weights_digest()
    bank = ExpertBank(experts)
    mixed = build_mixed(tasks, "auto", seed, "train")
    held_out = build_mixed(tasks, "auto", seed, "validation")
    bank_before = bank.digests()
    params, router_report = train_router(base, bank, mixed, RouterConfig(seed=seed), held_out)
    return Suite(base, tasks, experts, reports, bank, params, router_report, held_out,
                 before, after_experts, base.weights_digest(), bank_before, bank.digests())
