"""Tensor-train LoRA experts with a noisy top-1 router, at desk scale."""

from ttmoe.errors import (
    CheckpointError,
    ConfigError,
    CorrectnessError,
    ShapeError,
    TrainingDivergence,
)
from ttmoe.tt import (
    TtCores,
    TtShape,
    init_cores,
    lora_param_count,
    tt_contract_backward,
    tt_contract_forward,
    tt_param_count,
    tt_reconstruct,
    validate_shape,
)
from ttmoe.router import router_param_count

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "CorrectnessError",
    "ShapeError",
    "TrainingDivergence",
    "TtCores",
    "TtShape",
    "init_cores",
    "lora_param_count",
    "router_param_count",
    "tt_contract_backward",
    "tt_contract_forward",
    "tt_param_count",
    "tt_reconstruct",
    "validate_shape",
]
