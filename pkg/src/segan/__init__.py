"""Adversarial segmentation with a multi-scale L1 critic loss, on a small numpy autodiff core."""
from .tensor import Tensor, backward, float64_mode, no_grad
from .models import NetSpec, build_critic, build_segmentor, critic_features, segmentor_forward
from .losses import LossConfig, average_multi_critic_loss, mask_image, multiscale_l1, pixelwise_baseline_loss
from .training import TrainConfig, TrainHistory, assemble_variant, critic_step, segmentor_step, train
from .metrics import MetricsReport, dice, precision, sensitivity, threshold
from .volume_io import Volume, load_volume, save_volume

__all__ = [
    "Tensor", "backward", "float64_mode", "no_grad",
    "NetSpec", "build_critic", "build_segmentor", "critic_features", "segmentor_forward",
    "LossConfig", "average_multi_critic_loss", "mask_image", "multiscale_l1", "pixelwise_baseline_loss",
    "TrainConfig", "TrainHistory", "assemble_variant", "critic_step", "segmentor_step", "train",
    "MetricsReport", "dice", "precision", "sensitivity", "threshold",
    "Volume", "load_volume", "save_volume",
]
