from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import AdamW, clip_gradients, cosine_lr, global_grad_norm, learning_rate
from .trainer import (
    StepResult,
    Trainer,
    TrainResult,
    epoch_checkpoint_name,
    train,
)

__all__ = [
    "AdamW",
    "Checkpoint",
    "StepResult",
    "TrainResult",
    "Trainer",
    "clip_gradients",
    "cosine_lr",
    "epoch_checkpoint_name",
    "global_grad_norm",
    "learning_rate",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
