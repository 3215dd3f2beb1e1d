"""Dynamic routing networks with path consistency and diversity regularisation."""

from codinet.blocks import BlockSpec, CostTable, NetSpec, build_cost_table
from codinet.config import Config, ConfigError, parse_config
from codinet.losses import RegularizerConfig, codinet_objective, consistency_loss, cost_loss, diversity_loss, total_loss
from codinet.network import DynamicNet, group_center
from codinet.rng import Rng
from codinet.router import GumbelConfig
from codinet.tensor import Tensor, backward, no_grad
from codinet.training import TrainConfig, evaluate, finetune_stage2, train_stage1

__version__ = "0.1.0"

__all__ = [
    "BlockSpec",
    "Config",
    "ConfigError",
    "CostTable",
    "DynamicNet",
    "GumbelConfig",
    "NetSpec",
    "RegularizerConfig",
    "Rng",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_cost_table",
    "codinet_objective",
    "consistency_loss",
    "cost_loss",
    "diversity_loss",
    "evaluate",
    "finetune_stage2",
    "group_center",
    "no_grad",
    "parse_config",
    "total_loss",
    "train_stage1",
]
