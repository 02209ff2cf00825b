"""One-shot segmentation with similarity guidance, on a small numpy autograd core."""

from .net import ModelConfig, forward_episode, init_params, predict_mask
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "forward_episode",
    "init_params",
    "load_checkpoint",
    "predict_mask",
    "save_checkpoint",
    "train",
]
__version__ = "0.1.0"
