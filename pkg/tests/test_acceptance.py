"""The eight acceptance criteria, each at its stated tolerance.

Criteria 3 and 4 share one 2000-iteration S3-3C run.  Every test records a
pass/fail line that pytest prints in an "acceptance criteria" section.
"""
import io
import time
from contextlib import contextmanager

import numpy as np
import pytest

from segan.cli import ablation_table, run_ablation, run_cli
from segan.config import RunConfig
from segan.data import SliceSet, SynthSpec, gen_synthetic, load_dataset, restack, slice_axial
from segan.gradcheck import TOLERANCE, run_suite
from segan.losses import LossConfig, mask_image, multiscale_l1
from segan.metrics import dice, precision, sensitivity
from segan.models import NetSpec, build_critic
from segan.tensor import Tensor, mean_abs
from segan.training import TrainConfig, boundedness_diagnostic, empirical_lipschitz, train
from segan.volume_io import Volume, read_record, write_record

from conftest import ACCEPTANCE

CLIP = 0.01
RUN_ITERS = 2000
DICE_TARGET = 0.85
TIME_LIMIT_S = 30 * 60
WINDOW = 100
WARMUP = 200
ABLATION_ITERS = 400
ABLATION_SEEDS = (0, 1, 2)


@contextmanager
def criterion(num, title):
    """Record PASS unless the body raises; the detail list can be appended to."""
    detail = []
    try:
        yield detail
    except BaseException:
        ACCEPTANCE[num] = (title, False, "; ".join(detail) or "see traceback")
        raise
    ACCEPTANCE[num] = (title, True, "; ".join(detail))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_synth")
    gen_synthetic(SynthSpec(), out)
    return out


@pytest.fixture(scope="module")
def long_run(synth_dir):
    """One S3-3C run with clipping, checked after every iteration."""
    cfg = TrainConfig(variant="S3_3C", max_iters=RUN_ITERS, clip_c=CLIP, seed=0, eval_every=100, timing=True)
    val = load_dataset(synth_dir, "val")
    rng = np.random.default_rng(99)
    probes = []
    weights, lipschitz = [], {}

    def watch(it, nets, rec):
        weights.append(nets.max_abs_critic_weight())
        if it % 500 == 0 or it == 1:
            lipschitz[it] = max(empirical_lipschitz(c, probes) for c in nets.critics)

    vs = SliceSet.from_handle(load_dataset(synth_dir, "val"))
    for _ in range(4):
        i, j = rng.choice(len(vs), 2, replace=False)
        probes.append((vs.images[i][:, :64, :64], vs.images[j][:, :64, :64]))

    start = time.perf_counter()
    result = train(cfg, load_dataset(synth_dir, "train"), val, callback=watch)
    return result, weights, lipschitz, time.perf_counter() - start


def test_c1_gradient_suite():
    with criterion(1, "finite-difference gradient suite") as d:
        start = time.perf_counter()
        results = run_suite()
        elapsed = time.perf_counter() - start
        worst = max(results, key=lambda r: r.error)
        d.append(f"{len(results)} checks, max rel err {worst.error:.2e} ({worst.name}), {elapsed:.1f}s")
        names = " ".join(r.name for r in results)
        for op in ("conv", "resize2x", "leaky_relu", "sigmoid", "batch_norm", "bce", "pipeline/theta_S",
                   "pipeline/theta_C"):
            assert op in names
        assert worst.error < TOLERANCE
        assert elapsed < 120


def test_c2_loss_identities():
    with criterion(2, "loss identities") as d:
        rng = np.random.default_rng(0)
        c = build_critic(NetSpec("critic", 3, base_feature_maps=16), 0)
        x = Tensor(rng.random((4, 3, 64, 64)).astype(np.float32))
        pred = Tensor(rng.random((4, 1, 64, 64)).astype(np.float32))
        gt = Tensor((rng.random((4, 1, 64, 64)) > 0.5).astype(np.float32))
        zero = multiscale_l1(c, x, gt, gt, LossConfig()).item()
        s0 = multiscale_l1(c, x, pred, gt, LossConfig("s0")).item()
        direct = mean_abs(mask_image(x, pred), mask_image(x, gt)).item()
        per = [multiscale_l1(c, x, pred, gt, LossConfig(scales=(i,))).item() for i in range(4)]
        full = multiscale_l1(c, x, pred, gt, LossConfig()).item()
        d.append(f"pred=gt loss {zero}; |s0-mae| {abs(s0 - direct):.1e}; |all-mean| {abs(full - np.mean(per)):.1e}")
        assert zero == 0.0
        assert abs(s0 - direct) <= 1e-6
        assert abs(full - np.mean(per)) <= 1e-6


def test_c3_clipping_and_boundedness(long_run):
    result, weights, lipschitz, _ = long_run
    with criterion(3, "weight clipping and loss boundedness") as d:
        losses = result.history.column("loss_s")
        early = losses[:WINDOW].max()
        late = losses[WARMUP:].max()
        rep = boundedness_diagnostic(result.history, WINDOW)
        lip = ", ".join(f"{k}:{v:.3g}" for k, v in sorted(lipschitz.items()))
        d.append(f"max|theta_C| {max(weights):.6f} over {len(weights)} updates; "
                 f"late max loss {late:.4g} vs early max {early:.4g} (ratio {late / early:.3f}); "
                 f"trailing slope {rep.slope:.2e}; Lipschitz estimates {lip}")
        assert len(weights) == RUN_ITERS
        assert max(weights) <= CLIP
        assert late <= 1.1 * early
        assert not rep.flagged
        assert all(np.isfinite(v) for v in lipschitz.values())


def test_c4_convergence(long_run):
    result, _, _, elapsed = long_run
    with criterion(4, "S3-3C reaches validation Dice >= 0.85") as d:
        evals = result.history.evaluations()
        best_it, best = max(evals, key=lambda e: np.mean(e[1]))
        first = next((it for it, dc in evals if np.mean(dc) >= DICE_TARGET), None)
        d.append(f"best mean Dice {np.mean(best):.4f} at iter {best_it} "
                 f"(per class {', '.join(f'{v:.3f}' for v in best)}); first >= {DICE_TARGET} at iter {first}; "
                 f"{elapsed / 60:.1f} min")
        assert np.mean(best) >= DICE_TARGET
        assert elapsed < TIME_LIMIT_S


def test_c5_ablation_ordering(synth_dir, tmp_path):
    with criterion(5, "multiscale variants >= single-scale variants (trend check)") as d:
        base = RunConfig()
        base.train.max_iters = ABLATION_ITERS
        base.train.eval_every = 50
        variants = ("S1_1C", "S3_3C", "S3_3C_s0", "S3_3C_s3")
        rows = run_ablation(base, synth_dir, tmp_path, ABLATION_SEEDS, variants=variants)
        _, table = ablation_table(rows)
        means = {v: float(np.mean([np.mean(r[2]) for r in rows if r[0] == v])) for v in variants}
        d.append(" ".join(f"{v}={m:.4f}" for v, m in means.items()))
        print(table)
        for multi in ("S1_1C", "S3_3C"):
            for single in ("S3_3C_s0", "S3_3C_s3"):
                assert means[multi] >= means[single], f"{multi} {means[multi]:.4f} < {single} {means[single]:.4f}"


def brute_counts(P, T):
    p = t = pt = 0
    for a, b in zip(P.ravel().tolist(), T.ravel().tolist()):
        p += a
        t += b
        pt += a * b
    return p, t, pt


def test_c6_metric_oracle():
    with criterion(6, "metrics match a brute-force counter") as d:
        rng = np.random.default_rng(6)
        empties = 0
        for i in range(1000):
            shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
            density = [0.0, 0.1, 0.5, 0.9, 1.0][i % 5]
            P = (rng.random(shape) < density).astype(np.uint8)
            T = (rng.random(shape) < [0.0, 0.3, 0.5, 1.0][i % 4]).astype(np.uint8)
            p, t, pt = brute_counts(P, T)
            empties += (p == 0) or (t == 0)
            exp_d = 1.0 if p + t == 0 else 2 * pt / (p + t)
            exp_p = (1.0 if t == 0 else 0.0) if p == 0 else pt / p
            exp_s = (1.0 if p == 0 else 0.0) if t == 0 else pt / t
            assert dice(P, T) == exp_d and precision(P, T) == exp_p and sensitivity(P, T) == exp_s
        d.append(f"1000 masks, {empties} with an empty set")
        assert empties > 100


def test_c7_determinism(synth_dir, tmp_path):
    with criterion(7, "identical config and seed give bit-identical history") as d:
        cfg = tmp_path / "run.cfg"
        cfg.write_text("max_iters=20\neval_every=10\nseed=4\n")
        for name in ("a", "b"):
            assert run_cli(["train", "--config", str(cfg), "--data", str(synth_dir), "--out", str(tmp_path / name)]) == 0
        a, b = (tmp_path / "a" / "history.csv").read_bytes(), (tmp_path / "b" / "history.csv").read_bytes()
        rows = len(a.splitlines()) - 1
        d.append(f"{rows} rows, {len(a)} bytes each")
        assert a == b
        assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_c8_io_round_trip():
    with criterion(8, "SEGV round trip and slice/restack inverse") as d:
        rng = np.random.default_rng(8)
        n = 0
        for i in range(200):
            shape = tuple(int(v) for v in rng.integers(1, 7, size=4))
            if i % 2:
                vox = rng.integers(0, 2**32, size=shape, dtype=np.uint64).astype(np.uint32).view(np.float32)
            else:
                vox = rng.integers(0, 256, size=shape).astype(np.uint8)
            meta = {"i": str(i), "note": "x=y"} if i % 3 else {}
            buf = io.BytesIO()
            write_record(buf, vox, meta)
            back, bmeta, end = read_record(buf.getvalue())
            assert back.dtype == vox.dtype and back.shape == vox.shape
            assert back.tobytes() == vox.tobytes() and bmeta == meta and end == len(buf.getvalue())
            v = Volume(vox, meta)
            assert restack(slice_axial(v), meta) == v
            n += 1
        d.append(f"{n} volumes, both dtypes")
