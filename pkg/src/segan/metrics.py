"""Dice, precision and sensitivity per region class, over whole volumes."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .data import restack
from .volume_io import Volume


def threshold(prob: np.ndarray, t: float = 0.5) -> np.ndarray:
    """1 where prob >= t, else 0 (uint8)."""
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return (np.asarray(prob) >= t).astype(np.uint8)


def _check(p: np.ndarray, t: np.ndarray):
    if p.shape != t.shape:
        raise ValueError(f"mask shapes {p.shape} and {t.shape} differ")


def _counts(p, t) -> tuple[int, int, int]:
    p = np.asarray(p).astype(bool)
    t = np.asarray(t).astype(bool)
    return int(p.sum()), int(t.sum()), int(np.logical_and(p, t).sum())


def dice_from_counts(p: int, t: int, pt: int) -> float:
    if p + t == 0:
        return 1.0
    return 2.0 * pt / (p + t)


def _ratio(pt: int, denom: int, other: int) -> float:
    if denom == 0:
        return 1.0 if other == 0 else 0.0
    return pt / denom


def dice(P: np.ndarray, T: np.ndarray) -> float:
    """2|P∩T| / (|P| + |T|); two empty masks score 1."""
    _check(P, T)
    return dice_from_counts(*_counts(P, T))


def precision(P: np.ndarray, T: np.ndarray) -> float:
    _check(P, T)
    p, t, pt = _counts(P, T)
    return _ratio(pt, p, t)


def sensitivity(P: np.ndarray, T: np.ndarray) -> float:
    _check(P, T)
    p, t, pt = _counts(P, T)
    return _ratio(pt, t, p)


@dataclass
class ClassMetrics:
    p: int
    t: int
    pt: int

    @property
    def dice(self) -> float:
        return dice_from_counts(self.p, self.t, self.pt)

    @property
    def precision(self) -> float:
        return _ratio(self.pt, self.p, self.t)

    @property
    def sensitivity(self) -> float:
        return _ratio(self.pt, self.t, self.p)

    def __add__(self, other: ClassMetrics) -> ClassMetrics:
        return ClassMetrics(self.p + other.p, self.t + other.t, self.pt + other.pt)


@dataclass
class MetricsReport:
    classes: list[ClassMetrics] = field(default_factory=list)

    @classmethod
    def from_masks(cls, pred: np.ndarray, gt: np.ndarray) -> MetricsReport:
        """``pred``/``gt`` are binary with the class axis first."""
        _check(pred, gt)
        return cls([ClassMetrics(*_counts(pred[k], gt[k])) for k in range(pred.shape[0])])

    def merge(self, other: MetricsReport) -> MetricsReport:
        if not self.classes:
            return other
        return MetricsReport([a + b for a, b in zip(self.classes, other.classes)])

    @property
    def dice(self) -> list[float]:
        return [c.dice for c in self.classes]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.classes else float("nan")

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(c, attr) for c in self.classes]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,dice,precision,sensitivity,p,t,pt\n")
        for k, c in enumerate(self.classes):
            buf.write(f"{k},{c.dice:.6f},{c.precision:.6f},{c.sensitivity:.6f},{c.p},{c.t},{c.pt}\n")
        return buf.getvalue()

    def table(self, names: list[str] | None = None) -> str:
        names = names or [f"class {k}" for k in range(len(self.classes))]
        lines = [f"{'region':<12}{'dice':>8}{'prec':>8}{'sens':>8}{'|P|':>10}{'|T|':>10}{'|P∩T|':>10}"]
        for name, c in zip(names, self.classes):
            lines.append(f"{name:<12}{c.dice:8.4f}{c.precision:8.4f}{c.sensitivity:8.4f}{c.p:10d}{c.t:10d}{c.pt:10d}")
        lines.append(f"{'mean':<12}{self.mean('dice'):8.4f}{self.mean('precision'):8.4f}{self.mean('sensitivity'):8.4f}")
        return "\n".join(lines)


def evaluate_volume(pred_probs: list[np.ndarray], gt: Volume, t: float = 0.5) -> MetricsReport:
    """Restack per-slice (K, H, W) probability maps and score them against a (K, H, W, D) label volume."""
    if len(pred_probs) != gt.dims[3]:
        raise ValueError(f"{len(pred_probs)} slices for a volume of depth {gt.dims[3]}")
    stacked = restack([threshold(p, t) for p in pred_probs])
    if stacked.dims != gt.dims:
        raise ValueError(f"prediction dims {stacked.dims} differ from ground truth {gt.dims}")
    return MetricsReport.from_masks(stacked.voxels, gt.voxels)
