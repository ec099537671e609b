"""3D encoder-decoder segmentation network, loss, augmentation, training."""

from .model import UNet3D, UNet3DConfig, build_model, bottleneck_shape
from .losses import cross_entropy_loss, dice_ce_loss, soft_dice_loss
from .augment import AugmentationConfig, augment
from .sampling import sample_patch
from .training import Checkpoint, TrainingCase, TrainingConfig, lr_schedule, train

__all__ = [
    "UNet3D",
    "UNet3DConfig",
    "build_model",
    "bottleneck_shape",
    "dice_ce_loss",
    "soft_dice_loss",
    "cross_entropy_loss",
    "AugmentationConfig",
    "augment",
    "sample_patch",
    "TrainingConfig",
    "TrainingCase",
    "Checkpoint",
    "lr_schedule",
    "train",
]
