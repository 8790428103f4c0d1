"""Budget-conditioned attention-head gating for a small transformer encoder."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .gating import GateParams, HeadMask, hard_mask, head_count, soft_gates, straight_through_gates
from .model import EncoderModel, ModelConfig
from .training import TrainConfig

__all__ = ["Checkpoint", "EncoderModel", "GateParams", "HeadMask", "ModelConfig", "TrainConfig",
           "hard_mask", "head_count", "load_checkpoint", "save_checkpoint", "soft_gates",
           "straight_through_gates"]
__version__ = "0.1.0"
