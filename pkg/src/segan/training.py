"""Variant assembly, the alternating critic/segmentor loop and stability diagnostics."""
from __future__ import annotations

import copy
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .data import BatchSampler, DataError, DatasetHandle, SliceSet, prepare_volume, slice_axial
from .layers import OptimState, channels_last, clip_weights, rmsprop_step, zero_grads
from .losses import (
    LossConfig,
    average_multi_critic_loss,
    feature_l1,
    mask_image,
    multiscale_l1,
    pixelwise_baseline_loss,
)
from .metrics import MetricsReport, evaluate_volume, threshold
from .models import NetParams, NetSpec, build_critic, build_segmentor, critic_features, frozen, segmentor_forward
from .tensor import Tensor, backward, channel, concat_channels, no_grad
from .volume_io import Volume, load_volume

log = logging.getLogger(__name__)

VARIANTS = ("S1_1C", "S3_1C", "S3_3C", "S3_3C_s0", "S3_3C_s3", "UNET_BASELINE")

# Published training constants; the desk-scale defaults below are what fits a CPU.
PUBLISHED_BATCH_SIZE = 64
PUBLISHED_LR = 2e-5


class TrainingDiverged(FloatingPointError):
    """A loss or parameter went non-finite; ``iteration`` and ``term`` say where."""

    def __init__(self, iteration: int, term: str):
        super().__init__(f"non-finite {term} at iteration {iteration}")
        self.iteration = iteration
        self.term = term


@dataclass
class TrainConfig:
    variant: str = "S3_3C"
    classes: int = 3
    image_channels: int = 3
    batch_size: int = 16
    lr: float = 5e-4
    max_iters: int = 2000
    clip_c: float | None = 0.01  # None turns clipping off
    seed: int = 0
    base_feature_maps: int = 16
    eval_every: int = 100
    crop_size: int = 64
    segmentor_blocks: int = 4
    critic_blocks: int = 3
    include_input_scale: bool = True
    timing: bool = False  # when off, ms_elapsed is logged as 0 so histories compare bitwise

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if self.max_iters < 0 or self.eval_every < 0:
            raise ValueError("max_iters and eval_every must be >= 0")
        if self.clip_c is not None and not self.clip_c > 0:
            raise ValueError("clip_c must be positive or off")
        if self.crop_size % 2 ** self.segmentor_blocks:
            raise ValueError(f"crop_size {self.crop_size} must divide by 2^{self.segmentor_blocks}")

    def loss_config(self) -> LossConfig:
        kind = {"S3_3C_s0": "s0", "S3_3C_s3": "s3", "UNET_BASELINE": "pixelwise_baseline"}.get(self.variant, "multiscale")
        return LossConfig(kind, self.critic_blocks, self.include_input_scale)

    def as_meta(self) -> dict[str, str]:
        return {f"cfg.{k}": ("off" if v is None else str(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> TrainConfig:
        kw = {}
        for f in fields(cls):
            raw = meta.get(f"cfg.{f.name}")
            if raw is not None:
                kw[f.name] = parse_field(f.name, raw)
        return cls(**kw)


def parse_field(name: str, raw: str):
    """Parse one TrainConfig value from text."""
    default = getattr(TrainConfig, name)
    if name == "clip_c":
        return None if raw.strip().lower() in ("off", "none", "0") else float(raw)
    if isinstance(default, bool):
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    return type(default)(raw.strip())


@dataclass
class Nets:
    """Everything one variant trains.

    ``wiring`` is one of ``pairs`` (one segmentor and critic per class),
    ``concat`` (one critic sees all masked images stacked on channels),
    ``per_class`` (critic k scores class k) or ``pixelwise`` (no critic).
    """

    wiring: str
    segmentors: list[NetParams]
    critics: list[NetParams]
    loss_cfg: LossConfig
    opt_s: OptimState
    opt_c: OptimState

    def segmentor_params(self) -> list[Tensor]:
        return [t for s in self.segmentors for t in s.parameters()]

    def critic_params(self) -> list[Tensor]:
        return [t for c in self.critics for t in c.parameters()]

    def max_abs_critic_weight(self) -> float:
        return max((c.max_abs_weight() for c in self.critics), default=0.0)

    def set_training(self, training: bool):
        for net in self.segmentors + self.critics:
            net.set_training(training)


def assemble_variant(cfg: TrainConfig, seed: int) -> Nets:
    cfg.validate()
    k, ch = cfg.classes, cfg.image_channels
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2 * k + 2)]

    def seg(out_c, s):
        spec = NetSpec("segmentor", ch, out_c, cfg.segmentor_blocks, cfg.segmentor_blocks, cfg.base_feature_maps)
        return build_segmentor(spec, s)

    def crit(in_c, s):
        return build_critic(NetSpec("critic", in_c, 1, cfg.critic_blocks, 0, cfg.base_feature_maps), s)

    if cfg.variant == "S1_1C":
        wiring = "pairs"
        segs = [seg(1, seeds[i]) for i in range(k)]
        crits = [crit(ch, seeds[k + i]) for i in range(k)]
    elif cfg.variant == "S3_1C":
        wiring = "concat"
        segs = [seg(k, seeds[0])]
        crits = [crit(k * ch, seeds[k])]
    elif cfg.variant == "UNET_BASELINE":
        wiring = "pixelwise"
        segs = [seg(k, seeds[0])]
        crits = []
    else:
        wiring = "per_class"
        segs = [seg(k, seeds[0])]
        crits = [crit(ch, seeds[k + i]) for i in range(k)]
    nets = Nets(wiring, segs, crits, cfg.loss_config(), OptimState(cfg.lr), OptimState(cfg.lr))
    if cfg.clip_c is not None and crits:
        # Start inside the clipped set so the bound holds from iteration 0.
        clip_weights(nets.critic_params(), cfg.clip_c)
    return nets


def predict(nets: Nets, x: Tensor) -> Tensor:
    """Per-class probabilities [N, classes, H, W] from the variant's segmentor(s)."""
    if nets.wiring == "pairs":
        return concat_channels([segmentor_forward(s, x) for s in nets.segmentors])
    return segmentor_forward(nets.segmentors[0], x)


def variant_loss(nets: Nets, x: Tensor, pred: Tensor, gt: Tensor) -> Tensor:
    """The one objective both players share."""
    k = pred.shape[1]
    if nets.wiring == "pixelwise":
        return pixelwise_baseline_loss(pred, gt)
    if nets.wiring == "concat":
        # Class order 0, 1, ..., K-1 along the channel axis.
        mp = concat_channels([mask_image(x, channel(pred, i)) for i in range(k)])
        mg = concat_channels([mask_image(x, channel(gt, i)) for i in range(k)])
        return feature_l1(nets.critics[0], mp, mg, nets.loss_cfg)
    return average_multi_critic_loss(
        [multiscale_l1(nets.critics[i], x, channel(pred, i), channel(gt, i), nets.loss_cfg) for i in range(k)])


def _as_batch(batch) -> tuple[Tensor, Tensor]:
    x, y = batch
    if isinstance(x, Tensor):
        return x, y
    if len(x) == 0:
        raise DataError("empty batch")
    return Tensor(channels_last(np.asarray(x))), Tensor(channels_last(np.asarray(y)))


def critic_step(batch, nets: Nets, cfg: TrainConfig, pred: np.ndarray | None = None) -> float:
    """One ascent step on the critics with the segmentor(s) held fixed.

    ``pred`` may carry the segmentor output already computed for this batch.
    Returns the loss before the update.
    """
    if not nets.critics:
        return 0.0
    x, y = _as_batch(batch)
    if pred is None:
        with frozen(*nets.segmentors), no_grad():
            pred = predict(nets, x).data
    params = nets.critic_params()
    zero_grads(params)
    loss = variant_loss(nets, x, Tensor(pred), y)
    value = loss.item()
    if not np.isfinite(value):
        return value
    backward(loss)
    # Under s0 the loss never reaches the critic, so there may be nothing to update.
    rmsprop_step([p for p in params if p._grad is not None], nets.opt_c, sign=+1)
    zero_grads(params)
    if cfg.clip_c is not None:
        clip_weights(params, cfg.clip_c)
    return value


def segmentor_step(batch, nets: Nets, cfg: TrainConfig, pred: Tensor | None = None) -> float:
    """One descent step on the segmentor(s) with the critics held fixed."""
    x, y = _as_batch(batch)
    params = nets.segmentor_params()
    zero_grads(params)
    with frozen(*nets.critics):
        if pred is None:
            pred = predict(nets, x)
        loss = variant_loss(nets, x, pred, y)
        value = loss.item()
        if not np.isfinite(value):
            return value
        backward(loss)
    rmsprop_step(params, nets.opt_s, sign=-1)
    zero_grads(params)
    return value


# ---------------------------------------------------------------------------
# history and evaluation


@dataclass
class HistoryRecord:
    iter: int
    loss_s: float
    loss_c: float
    dice: list[float] | None
    max_abs_critic_w: float
    ms_elapsed: int


@dataclass
class TrainHistory:
    classes: int = 3
    records: list[HistoryRecord] = field(default_factory=list)

    def append(self, rec: HistoryRecord):
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError(f"iteration {rec.iter} after {self.records[-1].iter}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def evaluations(self) -> list[tuple[int, list[float]]]:
        return [(r.iter, r.dice) for r in self.records if r.dice is not None]

    def header(self) -> str:
        dice = ",".join(f"dice_c{k}" for k in range(self.classes))
        return f"iter,loss_s,loss_c,{dice},max_abs_critic_w,ms_elapsed"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.header() + "\n")
        for r in self.records:
            dice = ",".join(f"{d:.6f}" for d in r.dice) if r.dice is not None else "," * (self.classes - 1)
            buf.write(f"{r.iter},{r.loss_s:.9g},{r.loss_c:.9g},{dice},{r.max_abs_critic_w:.9g},{r.ms_elapsed}\n")
        return buf.getvalue()


def evaluate_slices(nets: Nets, slices: SliceSet, batch_size: int = 16, t: float = 0.5) -> MetricsReport:
    """Counts pooled over centre-cropped slices of every volume, scored in eval mode."""
    nets.set_training(False)
    report = MetricsReport()
    try:
        for start in range(0, len(slices), batch_size):
            idx = np.arange(start, min(start + batch_size, len(slices)))
            xs, ys = slices.center_batch(idx)
            with no_grad():
                probs = predict(nets, Tensor(channels_last(xs))).data
            report = report.merge(MetricsReport.from_masks(
                threshold(probs, t).transpose(1, 0, 2, 3), ys.astype(np.uint8).transpose(1, 0, 2, 3)))
    finally:
        nets.set_training(True)
    return report


def predict_volume(nets: Nets, image: Volume, batch_size: int = 16) -> list[np.ndarray]:
    """Per-slice (K, H, W) probabilities for a normalized (C, H, W, D) volume.

    Slices are zero-padded on the bottom/right to a multiple of
    2^segmentor_blocks and the output is cropped back.
    """
    slices = slice_axial(image)
    h, w = slices[0].shape[1:]
    div = 2 ** nets.segmentors[0].spec.down_blocks
    ph, pw = -h % div, -w % div
    out = []
    nets.set_training(False)
    try:
        for start in range(0, len(slices), batch_size):
            xs = np.stack(slices[start:start + batch_size])
            xs = np.pad(xs, ((0, 0), (0, 0), (0, ph), (0, pw)))
            with no_grad():
                probs = predict(nets, Tensor(channels_last(xs.astype(np.float32)))).data
            out.extend(np.ascontiguousarray(p[:, :h, :w]) for p in probs)
    finally:
        nets.set_training(True)
    return out


def evaluate_dataset(nets: Nets, handle: DatasetHandle, t: float = 0.5) -> MetricsReport:
    """Whole-volume scoring, counts pooled over every volume of the split."""
    if not handle.pairs:
        raise DataError(f"split {handle.split!r} is empty")
    report = MetricsReport()
    for ip, lp in handle.pairs:
        try:
            image, label = load_volume(ip), load_volume(lp)
        except OSError as exc:
            raise DataError(str(exc)) from exc
        image, label = prepare_volume(image, label, handle.volume_crop)
        report = report.merge(evaluate_volume(predict_volume(nets, image), label, t))
    return report


@dataclass
class Snapshot:
    """Parameter and running-stat arrays of every network, plus the config that built them."""

    cfg: TrainConfig
    iteration: int
    arrays: dict[str, np.ndarray]
    specs: dict[str, NetSpec]
    mean_dice: float = float("nan")


def net_prefixes(nets: Nets) -> list[tuple[str, NetParams]]:
    return [(f"seg{i}", s) for i, s in enumerate(nets.segmentors)] + \
        [(f"crit{i}", c) for i, c in enumerate(nets.critics)]


def snapshot(nets: Nets, cfg: TrainConfig, iteration: int, mean_dice: float = float("nan")) -> Snapshot:
    arrays, specs = {}, {}
    for prefix, net in net_prefixes(nets):
        specs[prefix] = copy.deepcopy(net.spec)
        for name, t, _ in net.named_tensors():
            arrays[f"{prefix}.{name}"] = t.data.copy()
        for lname, layer in net.layers.items():
            if hasattr(layer, "running_mean"):
                arrays[f"{prefix}.{lname}.running_mean"] = layer.running_mean.copy()
                arrays[f"{prefix}.{lname}.running_var"] = layer.running_var.copy()
    return Snapshot(copy.deepcopy(cfg), iteration, arrays, specs, mean_dice)


def restore(snap: Snapshot) -> Nets:
    """Rebuild networks from a snapshot (optimizer state starts fresh)."""
    nets = assemble_variant(snap.cfg, snap.cfg.seed)
    for prefix, net in net_prefixes(nets):
        if prefix not in snap.specs:
            raise ValueError(f"snapshot lacks network {prefix}")
        for name, t, _ in net.named_tensors():
            src = snap.arrays[f"{prefix}.{name}"]
            if src.shape != t.shape:
                raise ValueError(f"{prefix}.{name}: shape {src.shape} does not match {t.shape}")
            t.data = src.astype(t.dtype, copy=True)
        for lname, layer in net.layers.items():
            if hasattr(layer, "running_mean"):
                layer.running_mean = snap.arrays[f"{prefix}.{lname}.running_mean"].copy()
                layer.running_var = snap.arrays[f"{prefix}.{lname}.running_var"].copy()
    return nets


@dataclass
class TrainResult:
    history: TrainHistory
    best: Snapshot
    final: Snapshot
    nets: Nets


def train(
    cfg: TrainConfig,
    data: DatasetHandle,
    val: DatasetHandle | None = None,
    callback: Callable[[int, Nets, HistoryRecord], None] | None = None,
) -> TrainResult:
    """Alternate one critic step and one segmentor step per iteration.

    The segmentor output for the batch is computed once and shared by both
    steps; it is the same value either step would compute on its own.
    """
    cfg.validate()
    train_set = SliceSet.from_handle(DatasetHandle(data.pairs, data.split, cfg.crop_size, data.volume_crop))
    if train_set.classes != cfg.classes or train_set.channels != cfg.image_channels:
        raise DataError(
            f"data has {train_set.channels} channels/{train_set.classes} classes, "
            f"config expects {cfg.image_channels}/{cfg.classes}")
    val_set = None
    if val is not None and val.pairs and cfg.eval_every > 0:
        val_set = SliceSet.from_handle(DatasetHandle(val.pairs, val.split, cfg.crop_size, val.volume_crop))

    nets = assemble_variant(cfg, cfg.seed)
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    sampler = BatchSampler(len(train_set), cfg.batch_size, data_rng)
    history = TrainHistory(cfg.classes)
    best = snapshot(nets, cfg, 0)
    best_dice = -1.0
    start = time.perf_counter()

    for it in range(1, cfg.max_iters + 1):
        xs, ys = train_set.random_batch(sampler.next(), data_rng)
        batch = (Tensor(channels_last(xs)), Tensor(channels_last(ys)))
        pred = predict(nets, batch[0])
        loss_c = critic_step(batch, nets, cfg, pred=pred.data)
        if not np.isfinite(loss_c):
            raise TrainingDiverged(it, "loss_c")
        loss_s = segmentor_step(batch, nets, cfg, pred=pred)
        if not np.isfinite(loss_s):
            raise TrainingDiverged(it, "loss_s")
        for term, params in (("theta_s", nets.segmentor_params()), ("theta_c", nets.critic_params())):
            if not all(np.isfinite(p.data).all() for p in params):
                raise TrainingDiverged(it, term)

        dice = None
        if val_set is not None and (it % cfg.eval_every == 0 or it == cfg.max_iters):
            dice = evaluate_slices(nets, val_set, cfg.batch_size).dice
            mean = float(np.mean(dice))
            if mean > best_dice:
                best_dice = mean
                best = snapshot(nets, cfg, it, mean)
            log.info("iter %d loss %.5f dice %s", it, loss_s, " ".join(f"{d:.3f}" for d in dice))
        ms = int((time.perf_counter() - start) * 1000) if cfg.timing else 0
        rec = HistoryRecord(it, loss_s, loss_c, dice, nets.max_abs_critic_weight(), ms)
        history.append(rec)
        if callback is not None:
            callback(it, nets, rec)

    evals = history.evaluations()
    final = snapshot(nets, cfg, cfg.max_iters, float(np.mean(evals[-1][1])) if evals else float("nan"))
    if best_dice < 0:
        best = final
    return TrainResult(history, best, final, nets)


# ---------------------------------------------------------------------------
# stability diagnostics


@dataclass
class BoundednessReport:
    early_max: float
    trailing_max: float
    slope: float
    max_abs_critic_w: float
    flagged: bool


def boundedness_diagnostic(history: TrainHistory | Sequence[float], window: int, clipping: bool = True,
                           critic_w: Sequence[float] | None = None) -> BoundednessReport:
    """Compare the trailing window of loss_S against the first window.

    Flags when clipping is on and the trailing max exceeds the early max by
    more than 10%.  ``slope`` is the least-squares trend over the trailing
    window, per iteration.
    """
    if isinstance(history, TrainHistory):
        losses = history.column("loss_s")
        critic_w = history.column("max_abs_critic_w")
    else:
        losses = np.asarray(history, dtype=np.float64)
    if window < 1 or len(losses) < window:
        raise ValueError(f"history of length {len(losses)} is shorter than window {window}")
    early_max = float(losses[:window].max())
    tail = losses[-window:]
    trailing_max = float(tail.max())
    slope = float(np.polyfit(np.arange(window), tail, 1)[0]) if window > 1 else 0.0
    wmax = float(np.max(critic_w)) if critic_w is not None and len(critic_w) else 0.0
    return BoundednessReport(early_max, trailing_max, slope, wmax, clipping and trailing_max > 1.1 * early_max)


def empirical_lipschitz(net: NetParams | Callable[[Tensor], Tensor],
                        probe_pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """max over pairs of ||g(x1) - g(x2)||_1 / ||x1 - x2||_1.

    For a critic, g is its deepest feature map with batch norm in eval mode
    so that g is a fixed function of one input.  Identical pairs are skipped.
    """
    if isinstance(net, NetParams):
        def g(x):
            return critic_features(net, x)[-1]
        nets = [net]
    else:
        g, nets = net, []
    for n in nets:
        n.set_training(False)
    best = 0.0
    try:
        with no_grad():
            for a, b in probe_pairs:
                a = np.asarray(a)
                b = np.asarray(b)
                dist = float(np.abs(a.astype(np.float64) - b).sum())
                if dist == 0:
                    continue
                ga = g(Tensor(a[None] if a.ndim == 3 else a)).data
                gb = g(Tensor(b[None] if b.ndim == 3 else b)).data
                best = max(best, float(np.abs(ga.astype(np.float64) - gb).sum()) / dist)
    finally:
        for n in nets:
            n.set_training(True)
    return best
