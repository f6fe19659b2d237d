"""Volume preprocessing, slicing, paired cropping and the synthetic nested-region dataset."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import Volume, load_volume, save_volume

log = logging.getLogger(__name__)

MANIFEST = "manifest.tsv"
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


def center_crop(v: Volume, target: tuple[int, int, int]) -> Volume:
    """Spatial centre crop of a (C, H, W, D) volume; offset per axis is floor((dim - target) / 2)."""
    dims = v.dims[1:]
    if len(target) != 3 or any(t > d or t < 1 for t, d in zip(target, dims)):
        raise DataError(f"crop target {tuple(target)} does not fit inside {dims}")
    off = [(d - t) // 2 for d, t in zip(dims, target)]
    sl = tuple(slice(o, o + t) for o, t in zip(off, target))
    meta = dict(v.meta, crop_offset=",".join(map(str, off)))
    return Volume(np.ascontiguousarray(v.voxels[(slice(None),) + sl]), meta)


def slice_axial(v: Volume) -> list[np.ndarray]:
    """D slices of shape (C, H, W), in depth order."""
    return [np.ascontiguousarray(v.voxels[..., d]) for d in range(v.dims[3])]


def restack(slices: list[np.ndarray], meta: dict[str, str] | None = None) -> Volume:
    if not slices:
        raise DataError("restack needs at least one slice")
    shape = slices[0].shape
    for s in slices:
        if s.shape != shape or s.dtype != slices[0].dtype:
            raise DataError(f"slice {s.shape}/{s.dtype} does not match {shape}/{slices[0].dtype}")
    return Volume(np.stack(slices, axis=-1), dict(meta or {}))


def _crop_at(a: np.ndarray, oy: int, ox: int, size: int) -> np.ndarray:
    return a[..., oy:oy + size, ox:ox + size]


def random_crop2d(image: np.ndarray, label: np.ndarray | None, size: int, rng: np.random.Generator):
    """Crop image and label with one uniformly drawn offset pair.

    Always draws exactly two integers from ``rng``, even when no cropping is needed.
    Returns (image, label, (oy, ox)).
    """
    h, w = image.shape[-2:]
    if size > h or size > w:
        raise DataError(f"crop size {size} exceeds slice {h}x{w}")
    if label is not None and label.shape[-2:] != (h, w):
        raise DataError(f"label {label.shape} does not match image {image.shape}")
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    lab = None if label is None else _crop_at(label, oy, ox, size)
    return _crop_at(image, oy, ox, size), lab, (oy, ox)


def center_crop2d(image: np.ndarray, label: np.ndarray | None, size: int):
    h, w = image.shape[-2:]
    if size > h or size > w:
        raise DataError(f"crop size {size} exceeds slice {h}x{w}")
    oy, ox = (h - size) // 2, (w - size) // 2
    lab = None if label is None else _crop_at(label, oy, ox, size)
    return _crop_at(image, oy, ox, size), lab, (oy, ox)


def normalize_intensity(v: Volume) -> Volume:
    """Per-channel min-max scaling to [0, 1]; constant channels become 0."""
    if v.voxels.dtype != np.float32:
        raise DataError("intensity normalization needs a float32 volume")
    x = v.voxels.astype(np.float64)
    out = np.zeros_like(x)
    for c in range(x.shape[0]):
        lo, hi = x[c].min(), x[c].max()
        if hi > lo:
            out[c] = (x[c] - lo) / (hi - lo)
    return Volume(out.astype(np.float32), dict(v.meta))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Nested-ellipsoid stand-in for multi-modal tumour volumes.

    Class k+1 lies inside class k.  ``offsets[k][m]`` is the intensity
    added to modality m inside class k's region.  Distractor blobs copy the
    innermost class's appearance outside the outer region, so telling them
    apart needs context.
    """

    image_size: int = 72
    depth: int = 8
    classes: int = 3
    modalities: int = 3
    offsets: list[list[float]] = field(default_factory=lambda: [
        [0.45, 0.25, 0.0],
        [0.0, 0.35, -0.2],
        [0.0, 0.0, 0.7],
    ])
    background: float = 0.2
    noise_sigma: float = 0.08
    outer_radius: tuple[float, float] = (11.0, 19.0)
    inner_scale: tuple[float, float] = (0.5, 0.75)
    depth_radius: tuple[float, float] = (3.0, 5.0)
    distractors: int = 1
    train_volumes: int = 25
    val_volumes: int = 5
    test_volumes: int = 5
    seed: int = 0

    def validate(self):
        if self.classes < 1 or self.modalities < 1 or self.depth < 1 or self.image_size < 8:
            raise ValueError(f"invalid synthetic spec: {self}")
        if len(self.offsets) < self.classes or any(len(r) < self.modalities for r in self.offsets):
            raise ValueError("offsets needs one row per class with one value per modality")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _ellipsoid(shape, center, radii) -> np.ndarray:
    h, w, d = shape
    yy, xx, zz = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    r = ((yy - center[0]) / radii[0]) ** 2 + ((xx - center[1]) / radii[1]) ** 2 + ((zz - center[2]) / radii[2]) ** 2
    return r <= 1.0


def synth_sample(spec: SynthSpec, rng: np.random.Generator) -> tuple[Volume, Volume]:
    n, d = spec.image_size, spec.depth
    shape = (n, n, d)
    masks = []
    r_lo, r_hi = spec.outer_radius
    radii = np.array([rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi), rng.uniform(*spec.depth_radius)])
    margin = radii[:2].max() + 2
    center = np.array([rng.uniform(margin, n - 1 - margin), rng.uniform(margin, n - 1 - margin),
                       rng.uniform(0.3 * (d - 1), 0.7 * (d - 1))])
    outer = _ellipsoid(shape, center, radii)
    halo = _ellipsoid(shape, center, radii + np.array([3.0, 3.0, 1.0]))
    masks.append(outer)
    for _ in range(1, spec.classes):
        scale = rng.uniform(*spec.inner_scale)
        inner_r = radii * scale
        inner_r[2] = max(inner_r[2], 1.0)
        # Keep the inner centre well inside the parent so the region is never empty.
        slack = (radii - inner_r) * 0.5
        shift = rng.uniform(-1, 1, size=3) * slack
        shift[2] = 0.0
        c_in = center + shift
        region = _ellipsoid(shape, c_in, inner_r) & masks[-1]
        masks.append(region)
        radii, center = inner_r, c_in

    img = np.full((spec.modalities,) + shape, spec.background, dtype=np.float64)
    for k, m in enumerate(masks):
        for mod in range(spec.modalities):
            img[mod][m] += spec.offsets[k][mod]
    inner = spec.classes - 1
    for _ in range(spec.distractors):
        rr = np.array([rng.uniform(2.0, 4.0), rng.uniform(2.0, 4.0), rng.uniform(1.0, 2.5)])
        for _attempt in range(20):
            c = np.array([rng.uniform(4, n - 5), rng.uniform(4, n - 5), rng.uniform(0, d - 1)])
            blob = _ellipsoid(shape, c, rr)
            if not (blob & halo).any():
                break
        else:
            continue
        for mod in range(spec.modalities):
            img[mod][blob] += spec.offsets[inner][mod]
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    image = Volume(img.astype(np.float32), {"kind": "image"})
    label = Volume(np.stack(masks).astype(np.uint8), {"kind": "label"})
    return image, label


@dataclass
class DatasetHandle:
    pairs: list[tuple[Path, Path]]
    split: str
    crop_size: int = 64
    volume_crop: tuple[int, int, int] | None = None
    seed: int = 0


def write_manifest(path: Path, rows: list[tuple[str, str, str]]):
    with open(path, "w", encoding="utf-8") as fh:
        for img, lab, split in rows:
            fh.write(f"{img}\t{lab}\t{split}\n")


def read_manifest(path: Path) -> list[tuple[str, str, str]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise DataError(f"{path}:{lineno}: expected image<TAB>label<TAB>split")
        rows.append((parts[0], parts[1], parts[2]))
    return rows


def gen_synthetic(spec: SynthSpec, out_dir) -> dict[str, DatasetHandle]:
    """Write image/label volumes and a manifest; one child seed per sample."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": spec.train_volumes, "val": spec.val_volumes, "test": spec.test_volumes}
    total = sum(counts.values())
    seeds = np.random.SeedSequence(spec.seed).spawn(total)
    rows = []
    idx = 0
    for split in SPLITS:
        for i in range(counts[split]):
            image, label = synth_sample(spec, np.random.default_rng(seeds[idx]))
            idx += 1
            img_name, lab_name = f"{split}_{i:04d}_image.segv", f"{split}_{i:04d}_label.segv"
            save_volume(image, out / img_name)
            save_volume(label, out / lab_name)
            rows.append((img_name, lab_name, split))
    write_manifest(out / MANIFEST, rows)
    log.info("wrote %d synthetic volumes to %s", total, out)
    return {s: load_dataset(out, s) for s in SPLITS}


def load_dataset(data_dir, split: str, crop_size: int = 64, volume_crop=None, seed: int = 0) -> DatasetHandle:
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise DataError(f"no {MANIFEST} in {root}")
    pairs = [(root / img, root / lab) for img, lab, s in read_manifest(manifest) if s == split]
    return DatasetHandle(pairs, split, crop_size, volume_crop, seed)


def prepare_volume(image: Volume, label: Volume | None, volume_crop=None):
    """Centre-crop (optional) then normalize; the same preprocessing for training and inference."""
    if volume_crop is not None:
        image = center_crop(image, volume_crop)
        if label is not None:
            label = center_crop(label, volume_crop)
    return normalize_intensity(image), label


class SliceSet:
    """Axial slices of a split held in memory: images (S, C, H, W), labels (S, K, H, W)."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, volume_index: np.ndarray, crop_size: int):
        self.images = images
        self.labels = labels
        self.volume_index = volume_index
        self.crop_size = crop_size

    @classmethod
    def from_handle(cls, handle: DatasetHandle) -> SliceSet:
        if not handle.pairs:
            raise DataError(f"split {handle.split!r} is empty")
        imgs, labs, vidx = [], [], []
        ref = None
        for i, (ip, lp) in enumerate(handle.pairs):
            try:
                image, label = load_volume(ip), load_volume(lp)
            except OSError as exc:
                raise DataError(str(exc)) from exc
            if image.dims[1:] != label.dims[1:]:
                raise DataError(f"{ip} and {lp} have different spatial dims")
            image, label = prepare_volume(image, label, handle.volume_crop)
            if ref is None:
                ref = (image.dims[:3], label.dims[0])
            elif (image.dims[:3], label.dims[0]) != ref:
                raise DataError(f"{ip} shape {image.dims} differs from the first volume")
            imgs.extend(slice_axial(image))
            labs.extend(s.astype(np.float32) for s in slice_axial(label))
            vidx.extend([i] * image.dims[3])
        return cls(np.stack(imgs), np.stack(labs), np.array(vidx), handle.crop_size)

    def __len__(self):
        return len(self.images)

    @property
    def classes(self) -> int:
        return self.labels.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def random_batch(self, idx, rng: np.random.Generator):
        size = self.crop_size
        xs = np.empty((len(idx), self.channels, size, size), dtype=np.float32)
        ys = np.empty((len(idx), self.classes, size, size), dtype=np.float32)
        for b, i in enumerate(idx):
            xs[b], ys[b], _ = random_crop2d(self.images[i], self.labels[i], size, rng)
        return xs, ys

    def center_batch(self, idx):
        size = self.crop_size
        xs = np.stack([center_crop2d(self.images[i], None, size)[0] for i in idx])
        ys = np.stack([center_crop2d(self.labels[i], None, size)[0] for i in idx])
        return xs, ys


class BatchSampler:
    """Seeded epoch shuffling; each epoch visits every slice once."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return idx
