"""Finite-difference checks for every op, layer and the segmentor -> mask -> critic -> loss chain."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import batch_norm, conv2d, leaky_relu, new_batch_norm, new_conv, resize2x, sigmoid
from .losses import LossConfig, multiscale_l1, pixelwise_baseline_loss
from .models import NetSpec, build_critic, build_segmentor, critic_features, segmentor_forward
from .tensor import Tensor, float64_mode, weighted_sum

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], float]]]:
    def arr(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape))

    def check(fn, x):
        return T.finite_diff_check(fn, x)

    def proj(fn):
        # Random projection of a non-scalar output so every coordinate contributes.
        w = {}

        def wrapped(x):
            out = fn(x)
            if "w" not in w:
                w["w"] = rng.standard_normal(out.shape)
            return weighted_sum(out, w["w"])

        return wrapped

    checks = []

    a, b = arr(2, 3, 4, 4), arr(2, 3, 4, 4)
    checks.append(("add", lambda: check(proj(lambda x: T.add(x, b)), a)))
    checks.append(("scale", lambda: check(proj(lambda x: T.scale(x, -1.7)), a)))
    lab = arr(2, 1, 4, 4, lo=0, hi=1)
    checks.append(("hadamard/image", lambda: check(proj(lambda x: T.hadamard(x, lab)), a)))
    checks.append(("hadamard/label", lambda: check(proj(lambda m: T.hadamard(a, m)), lab)))
    checks.append(("concat", lambda: check(proj(lambda x: T.concat_channels([x, b, x])), a)))
    checks.append(("channel", lambda: check(proj(lambda x: T.channel(x, 1)), a)))
    checks.append(("mean_abs", lambda: check(lambda x: T.mean_abs(x, b), a)))
    s1, s2 = arr(), arr()
    checks.append(("mean_of", lambda: check(lambda x: T.mean_of([x, s2, T.scale(x, 2.0)]), s1)))
    checks.append(("sum", lambda: check(lambda x: T.sum_all(x), a)))

    x6 = arr(2, 3, 6, 6)
    for name, k, s in (("conv k3 s1", 3, 1), ("conv k4 s2", 4, 2), ("conv k3 s2", 3, 2)):
        p = new_conv(rng, 3, 4, k, s, std=0.5)
        p.bias.data = rng.uniform(-1, 1, size=4)
        checks.append((f"{name}/input", lambda p=p: check(proj(lambda x: conv2d(x, p)), x6)))
        checks.append((f"{name}/weight", lambda p=p: check(proj(lambda w: conv2d(x6, p)), p.weights)))
        checks.append((f"{name}/bias", lambda p=p: check(proj(lambda _b: conv2d(x6, p)), p.bias)))
    checks.append(("resize2x", lambda: check(proj(resize2x), arr(2, 3, 3, 3))))
    checks.append(("leaky_relu", lambda: check(proj(leaky_relu), a)))
    checks.append(("sigmoid", lambda: check(proj(sigmoid), arr(2, 3, 4, 4, lo=-4, hi=4))))

    bn = new_batch_norm(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, size=3)
    bn.beta.data = rng.uniform(-0.5, 0.5, size=3)
    bn.track_running_stats = False
    checks.append(("batch_norm train/input", lambda: check(proj(lambda x: batch_norm(x, bn)), a)))
    checks.append(("batch_norm train/gamma", lambda: check(proj(lambda g: batch_norm(a, bn)), bn.gamma)))
    checks.append(("batch_norm train/beta", lambda: check(proj(lambda g: batch_norm(a, bn)), bn.beta)))
    bn_eval = new_batch_norm(3)
    bn_eval.training = False
    bn_eval.running_mean = rng.uniform(-0.2, 0.2, size=3)
    bn_eval.running_var = rng.uniform(0.5, 2.0, size=3)
    bn_eval.gamma.data = rng.uniform(0.5, 1.5, size=3)
    checks.append(("batch_norm eval/input", lambda: check(proj(lambda x: batch_norm(x, bn_eval)), a)))

    gt_bin = Tensor((rng.random((2, 3, 4, 4)) > 0.5).astype(np.float64))
    checks.append(("bce", lambda: check(lambda p: pixelwise_baseline_loss(p, gt_bin), arr(2, 3, 4, 4, lo=0.05, hi=0.95))))

    # Tiny networks: two-block segmentor, two-block critic, 4x4 inputs, batch 3.
    seg = build_segmentor(NetSpec("segmentor", 2, 1, 2, 2, feature_map_schedule=[2, 3]), 1)
    crit = build_critic(NetSpec("critic", 2, 1, 2, 0, feature_map_schedule=[3, 4]), 2)
    for net in (seg, crit):
        for t in net.parameters():
            if t.data.ndim == 4:
                t.data = rng.normal(0, 0.5, size=t.shape)
        for bn_p in net.batch_norms():
            bn_p.track_running_stats = False
    xs = arr(3, 2, 4, 4, lo=0, hi=1)
    gt = Tensor((rng.random((3, 1, 4, 4)) > 0.5).astype(np.float64))
    cfg = LossConfig("multiscale", 2)

    def pipeline(_):
        return multiscale_l1(crit, xs, segmentor_forward(seg, xs), gt, cfg)

    checks.append(("segmentor/input", lambda: check(proj(lambda x: segmentor_forward(seg, x)), xs)))
    checks.append(("critic/input", lambda: check(proj(lambda x: critic_features(crit, x)[-1]), xs)))
    for name, t, _ in seg.named_tensors():
        checks.append((f"pipeline/theta_S {name}", lambda t=t: check(pipeline, t)))
    for name, t, _ in crit.named_tensors():
        checks.append((f"pipeline/theta_C {name}", lambda t=t: check(pipeline, t)))
    checks.append(("pipeline/input", lambda: check(lambda x: multiscale_l1(crit, x, segmentor_forward(seg, x), gt, cfg), xs)))
    return checks


def run_suite(seed: int = 0) -> list[CheckResult]:
    """All checks in 64-bit mode; each result's ``ok`` compares against ``TOLERANCE``."""
    results = []
    with float64_mode():
        rng = np.random.default_rng(seed)
        for name, fn in _checks(rng):
            start = time.perf_counter()
            err = fn()
            results.append(CheckResult(name, err, time.perf_counter() - start))
    return results
