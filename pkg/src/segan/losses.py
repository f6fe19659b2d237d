"""Masking, the multi-scale L1 feature loss, its single-scale ablations and the pixel-wise baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .models import NetParams, critic_features
from .tensor import ShapeError, Tensor, hadamard, make_node, mean_abs, mean_of

Variant = Literal["multiscale", "s0", "s3", "pixelwise_baseline"]


@dataclass
class LossConfig:
    """Which critic layers enter the loss.

    With ``num_layers`` L, ``multiscale`` uses {0..L} (or {1..L} when
    ``include_input_scale`` is off), ``s0`` uses {0} and ``s3`` uses {L}.
    """

    variant: Variant = "multiscale"
    num_layers: int = 3
    include_input_scale: bool = True
    scales: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.scales:
            if self.variant == "multiscale":
                start = 0 if self.include_input_scale else 1
                self.scales = tuple(range(start, self.num_layers + 1))
            elif self.variant == "s0":
                self.scales = (0,)
            elif self.variant == "s3":
                self.scales = (self.num_layers,)
            elif self.variant == "pixelwise_baseline":
                self.scales = ()
            else:
                raise ValueError(f"unknown loss variant {self.variant!r}")
        self.scales = tuple(sorted(set(self.scales)))
        if self.variant != "pixelwise_baseline":
            if not self.scales:
                raise ValueError("loss needs at least one scale")
            if min(self.scales) < 0 or max(self.scales) > self.num_layers:
                raise ValueError(f"scales {self.scales} outside 0..{self.num_layers}")


def mask_image(x: Tensor, label: Tensor, check: bool = False) -> Tensor:
    """Multiply every channel of ``x`` by a single-channel label map."""
    if label.data.ndim != 4 or label.shape[1] != 1:
        raise ShapeError(f"label map must have one channel, got {list(label.shape)}")
    if label.shape[0] != x.shape[0] or label.shape[2:] != x.shape[2:]:
        raise ShapeError(f"label {list(label.shape)} does not match image {list(x.shape)}")
    if check and (label.data.min() < 0 or label.data.max() > 1):
        raise ValueError("label values must lie in [0, 1]")
    return hadamard(x, label)


def feature_l1(critic: NetParams, masked_pred: Tensor, masked_gt: Tensor, cfg: LossConfig) -> Tensor:
    """Mean over the selected scales of the MAE between critic features of two masked inputs."""
    upto = max(cfg.scales)
    fp = critic_features(critic, masked_pred, upto=upto)
    fg = critic_features(critic, masked_gt, upto=upto)
    return mean_of([mean_abs(fp[i], fg[i]) for i in cfg.scales])


def multiscale_l1(critic: NetParams, x: Tensor, pred: Tensor, gt: Tensor, cfg: LossConfig) -> Tensor:
    if pred.data.ndim != 4 or pred.shape[1] != 1 or gt.shape != pred.shape:
        raise ShapeError(
            f"multiscale_l1 takes single-class maps, got pred {list(pred.shape)} and gt {list(gt.shape)}")
    return feature_l1(critic, mask_image(x, pred), mask_image(x, gt), cfg)


def average_multi_critic_loss(losses: Sequence[Tensor]) -> Tensor:
    if not losses:
        raise ValueError("no losses to average")
    return mean_of(list(losses))


PROB_FLOOR = 1e-7


def pixelwise_baseline_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Per-pixel, per-class binary cross-entropy with clamped probabilities."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pixelwise loss: shapes {list(pred.shape)} and {list(gt.shape)} differ")
    p = pred.data
    clamped = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    y = gt.data
    n = p.size
    ll = y * np.log(clamped) + (1 - y) * np.log1p(-clamped)
    out = np.asarray(-ll.sum(dtype=np.float64) / n, dtype=pred.dtype)
    inside = (p > PROB_FLOOR) & (p < 1 - PROB_FLOOR)

    def _backward(g):
        d = (clamped - y) / (clamped * (1 - clamped)) * (g / n)
        return (np.where(inside, d, 0).astype(p.dtype, copy=False), None)

    return make_node(out, [pred, gt], _backward, "bce")
