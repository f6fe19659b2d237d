"""Segmentor (encoder-decoder with skips) and critic (feature-extracting encoder)."""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .layers import (
    BatchNormParams,
    batch_norm,
    conv2d,
    leaky_relu,
    new_batch_norm,
    new_conv,
    resize2x,
    sigmoid,
)
from .tensor import ShapeError, Tensor, concat_channels


@dataclass
class NetSpec:
    kind: Literal["segmentor", "critic"]
    in_channels: int = 3
    out_channels: int = 3
    down_blocks: int | None = None
    up_blocks: int | None = None
    base_feature_maps: int = 64
    feature_map_schedule: list[int] | None = None

    def __post_init__(self):
        if self.kind not in ("segmentor", "critic"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.down_blocks is None:
            self.down_blocks = 4 if self.kind == "segmentor" else 3
        if self.up_blocks is None:
            self.up_blocks = self.down_blocks if self.kind == "segmentor" else 0
        if self.feature_map_schedule is None:
            self.feature_map_schedule = [self.base_feature_maps * 2 ** i for i in range(self.down_blocks)]

    def validate(self):
        if self.in_channels < 1 or self.down_blocks < 1:
            raise ValueError(f"inconsistent spec: {self}")
        if len(self.feature_map_schedule) != self.down_blocks:
            raise ValueError(
                f"feature_map_schedule has {len(self.feature_map_schedule)} entries for {self.down_blocks} down blocks")
        if self.kind == "segmentor":
            if self.up_blocks != self.down_blocks:
                raise ValueError(f"segmentor needs up_blocks == down_blocks, got {self.up_blocks} and {self.down_blocks}")
            if self.out_channels < 1:
                raise ValueError("segmentor needs at least one output class")
        elif self.up_blocks:
            raise ValueError("critic has no up blocks")

    def as_meta(self, prefix: str) -> dict[str, str]:
        return {
            f"{prefix}.kind": self.kind,
            f"{prefix}.in_channels": str(self.in_channels),
            f"{prefix}.out_channels": str(self.out_channels),
            f"{prefix}.down_blocks": str(self.down_blocks),
            f"{prefix}.up_blocks": str(self.up_blocks),
            f"{prefix}.schedule": ",".join(map(str, self.feature_map_schedule)),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str], prefix: str) -> NetSpec:
        return cls(
            kind=meta[f"{prefix}.kind"],
            in_channels=int(meta[f"{prefix}.in_channels"]),
            out_channels=int(meta[f"{prefix}.out_channels"]),
            down_blocks=int(meta[f"{prefix}.down_blocks"]),
            up_blocks=int(meta[f"{prefix}.up_blocks"]),
            feature_map_schedule=[int(v) for v in meta[f"{prefix}.schedule"].split(",")],
        )


@dataclass
class NetParams:
    spec: NetSpec
    layers: OrderedDict = field(default_factory=OrderedDict)

    def named_tensors(self):
        """(name, tensor, role) for every trainable tensor, in build order."""
        out = []
        for name, layer in self.layers.items():
            for role, t in layer.tensors():
                out.append((f"{name}.{role}", t, role))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_tensors()]

    def batch_norms(self) -> list[BatchNormParams]:
        return [l for l in self.layers.values() if isinstance(l, BatchNormParams)]

    def set_training(self, training: bool):
        for bn in self.batch_norms():
            bn.training = training

    def max_abs_weight(self) -> float:
        return max(float(np.abs(t.data).max()) for t in self.parameters())


@contextlib.contextmanager
def frozen(*nets: NetParams):
    """Hold networks fixed: no gradients into their parameters, no running-stat updates."""
    saved = []
    for net in nets:
        for t in net.parameters():
            saved.append((t, t.requires_grad))
            t.requires_grad = False
        for bn in net.batch_norms():
            saved.append((bn, bn.track_running_stats))
            bn.track_running_stats = False
    try:
        yield
    finally:
        for obj, flag in saved:
            if isinstance(obj, Tensor):
                obj.requires_grad = flag
            else:
                obj.track_running_stats = flag


def build_segmentor(spec: NetSpec, seed: int) -> NetParams:
    if spec.kind != "segmentor":
        raise ValueError(f"build_segmentor needs a segmentor spec, got {spec.kind!r}")
    spec.validate()
    rng = np.random.default_rng(seed)
    sched = spec.feature_map_schedule
    layers = OrderedDict()
    prev = spec.in_channels
    for i, ch in enumerate(sched):
        layers[f"enc{i}.conv"] = new_conv(rng, prev, ch, 4, 2)
        if i > 0:
            layers[f"enc{i}.bn"] = new_batch_norm(ch)
        prev = ch
    depth = spec.down_blocks
    for j in range(spec.up_blocks):
        # Decoder level j mirrors encoder level depth-2-j; the last level keeps sched[0].
        out_ch = sched[depth - 2 - j] if j < depth - 1 else sched[0]
        layers[f"dec{j}.conv"] = new_conv(rng, prev, out_ch, 3, 1)
        layers[f"dec{j}.bn"] = new_batch_norm(out_ch)
        prev = out_ch + (sched[depth - 2 - j] if j < depth - 1 else 0)
    layers["head.conv"] = new_conv(rng, prev, spec.out_channels, 3, 1)
    return NetParams(spec, layers)


def build_critic(spec: NetSpec, seed: int) -> NetParams:
    if spec.kind != "critic":
        raise ValueError(f"build_critic needs a critic spec, got {spec.kind!r}")
    spec.validate()
    rng = np.random.default_rng(seed)
    layers = OrderedDict()
    prev = spec.in_channels
    for i, ch in enumerate(spec.feature_map_schedule):
        layers[f"blk{i}.conv"] = new_conv(rng, prev, ch, 4, 2)
        if i > 0:
            layers[f"blk{i}.bn"] = new_batch_norm(ch)
        prev = ch
    return NetParams(spec, layers)


def init_params(spec: NetSpec, seed: int) -> NetParams:
    return build_segmentor(spec, seed) if spec.kind == "segmentor" else build_critic(spec, seed)


def _check_input(spec: NetSpec, x: Tensor):
    if x.data.ndim != 4:
        raise ShapeError(f"expected a 4-D input, got {list(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects {spec.in_channels}")
    div = 2 ** spec.down_blocks
    h, w = x.shape[2:]
    if h % div or w % div:
        raise ShapeError(f"spatial dims {h}x{w} must be divisible by {div}")


def segmentor_forward(params: NetParams, x: Tensor, drop_skips: tuple[int, ...] = ()) -> Tensor:
    """Per-class probability maps [N, out_channels, H, W].

    ``drop_skips`` zeroes the listed encoder levels' skip tensors (wiring tests).
    """
    spec = params.spec
    _check_input(spec, x)
    L = params.layers
    h = x
    skips = []
    for i in range(spec.down_blocks):
        h = conv2d(h, L[f"enc{i}.conv"])
        if i > 0:
            h = batch_norm(h, L[f"enc{i}.bn"])
        h = leaky_relu(h)
        skips.append(h)
    depth = spec.down_blocks
    for j in range(spec.up_blocks):
        h = resize2x(h)
        h = leaky_relu(batch_norm(conv2d(h, L[f"dec{j}.conv"]), L[f"dec{j}.bn"]))
        if j < depth - 1:
            level = depth - 2 - j
            skip = skips[level]
            if level in drop_skips:
                skip = Tensor(np.zeros_like(skip.data))
            h = concat_channels([h, skip])
    return sigmoid(conv2d(h, L["head.conv"]))


def critic_features(params: NetParams, x_masked: Tensor, upto: int | None = None) -> list[Tensor]:
    """[x_masked, block1, ..., blockL]; ``upto`` stops after that layer index."""
    spec = params.spec
    _check_input(spec, x_masked)
    last = spec.down_blocks if upto is None else upto
    feats = [x_masked]
    h = x_masked
    L = params.layers
    for i in range(last):
        h = conv2d(h, L[f"blk{i}.conv"])
        if i > 0:
            h = batch_norm(h, L[f"blk{i}.bn"])
        h = leaky_relu(h)
        feats.append(h)
    return feats

