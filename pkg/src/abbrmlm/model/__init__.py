from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .config import (
    DESK_MOE_PLAN,
    PAPER_REPLICA_MOE_PLAN,
    PRESETS,
    ModelConfig,
    desk_config,
    paper_replica_config,
    preset,
)
from .densify import densify_to_moe
from .modules import FeedForward, MaskedLM, MoELayer, build_model, moe_forward
from .objective import LossValue, compute_gradients, forward, mlm_loss
from .train import EpochLoss, TrainConfig, TrainResult, train

__all__ = [
    "DESK_MOE_PLAN", "PAPER_REPLICA_MOE_PLAN", "PRESETS", "ModelConfig", "desk_config",
    "paper_replica_config", "preset", "FeedForward", "MaskedLM", "MoELayer", "build_model",
    "moe_forward", "LossValue", "compute_gradients", "forward", "mlm_loss", "EpochLoss",
    "TrainConfig", "TrainResult", "train", "densify_to_moe", "save_checkpoint",
    "load_checkpoint", "read_header",
]
