"""Flat ``key=value`` run configuration covering training, loss and synthetic-data settings."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .training import PUBLISHED_BATCH_SIZE, PUBLISHED_LR, TrainConfig, parse_field


class ConfigError(ValueError):
    pass


# key -> (help text, published value or None)
TRAIN_DOCS = {
    "variant": ("architecture: S1_1C, S3_1C, S3_3C, S3_3C_s0, S3_3C_s3 or UNET_BASELINE", None),
    "classes": ("number of nested region classes", "3"),
    "image_channels": ("input modalities per slice", "3"),
    "batch_size": ("slices per iteration", str(PUBLISHED_BATCH_SIZE)),
    "lr": ("RMSProp learning rate for both players", repr(PUBLISHED_LR)),
    "max_iters": ("training iterations (one critic step + one segmentor step each)", None),
    "clip_c": ("critic weight clip range, or 'off'", None),
    "seed": ("seed for initialization, data order and crops", None),
    "base_feature_maps": ("channels of the first down block; doubles per block", "64"),
    "eval_every": ("iterations between validation passes (0 disables)", None),
    "crop_size": ("square training/validation crop", "160"),
    "segmentor_blocks": ("down (and up) blocks in the segmentor", "4"),
    "critic_blocks": ("down blocks in the critic", "3"),
    "timing": ("log wall-clock ms per row (breaks bitwise-identical histories)", None),
}
LOSS_DOCS = {
    "loss.include_input_scale": ("multiscale loss includes layer 0 (the masked input itself)", None),
}
SYNTH_DOCS = {
    "synth.image_size": "slice height and width",
    "synth.depth": "slices per volume",
    "synth.classes": "nested region classes",
    "synth.modalities": "image channels",
    "synth.offsets": "per-class intensity offsets, classes separated by ';', modalities by ','",
    "synth.background": "background intensity",
    "synth.noise_sigma": "Gaussian noise standard deviation",
    "synth.outer_radius": "min,max in-plane radius of the outer region",
    "synth.inner_scale": "min,max radius ratio of each inner region to its parent",
    "synth.depth_radius": "min,max through-plane radius of the outer region",
    "synth.distractors": "blobs mimicking the innermost class outside the lesion",
    "synth.train_volumes": "volumes in the train split",
    "synth.val_volumes": "volumes in the val split",
    "synth.test_volumes": "volumes in the test split",
    "synth.seed": "generator seed",
}


def _fmt(value) -> str:
    if value is None:
        return "off"
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ";".join(",".join(map(str, row)) for row in value)
        return ",".join(map(str, value))
    return str(value)


def _parse_synth(name: str, raw: str, default):
    try:
        if isinstance(default, list):
            return [[float(v) for v in row.split(",")] for row in raw.split(";")]
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in raw.split(","))
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return vals
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"synth.{name}: cannot parse {raw!r}: {exc}") from exc


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def set(self, key: str, raw: str):
        raw = raw.strip()
        if key in TRAIN_DOCS or key in LOSS_DOCS:
            name = "include_input_scale" if key == "loss.include_input_scale" else key
            try:
                setattr(self.train, name, parse_field(name, raw))
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r}: {exc}") from exc
        elif key in SYNTH_DOCS:
            name = key.split(".", 1)[1]
            setattr(self.synth, name, _parse_synth(name, raw, getattr(SynthSpec(), name)))
        else:
            raise ConfigError(f"unknown config key {key!r}")

    def items(self) -> list[tuple[str, str]]:
        out = [(k, _fmt(getattr(self.train, k))) for k in TRAIN_DOCS]
        out.append(("loss.include_input_scale", _fmt(self.train.include_input_scale)))
        out += [(k, _fmt(getattr(self.synth, k.split(".", 1)[1]))) for k in SYNTH_DOCS]
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def validate(self):
        try:
            self.train.validate()
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def defaults_table() -> str:
    """Every key with its desk-scale default, published value where one exists, and meaning."""
    cfg = RunConfig()
    docs = {k: v for k, v in TRAIN_DOCS.items()}
    docs.update(LOSS_DOCS)
    rows = [("key", "default", "published", "meaning")]
    for key, value in cfg.items():
        if key in docs:
            text, published = docs[key]
        else:
            text, published = SYNTH_DOCS[key], None
        rows.append((key, value, published or "-", text))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join(f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  {r[2]:<{widths[2]}}  {r[3]}" for r in rows)
