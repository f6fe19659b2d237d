"""Command-line entry points: gen-synth, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.  Failures
print one line ``error kind=<usage|data|numeric> msg=<text>`` on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, defaults_table, load_config
from .data import DataError, SynthSpec, gen_synthetic, load_dataset, prepare_volume, restack
from .gradcheck import TOLERANCE, run_suite
from .metrics import threshold
from .training import TrainingDiverged, evaluate_dataset, predict_volume, restore, train
from .volume_io import SegvError, load_volume, save_volume

log = logging.getLogger("segan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ABLATION_VARIANTS = ("S1_1C", "S3_1C", "S3_3C", "S3_3C_s0", "S3_3C_s3")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; route it to exit code 1 instead."""

    def error(self, message):
        raise UsageError(message)


def _run_config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def cmd_gen_synth(args) -> int:
    spec = _run_config(args.spec).synth if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    gen_synthetic(spec, args.out)
    print(f"wrote {spec.train_volumes + spec.val_volumes + spec.test_volumes} volumes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args.config).train
    if args.seed is not None:
        cfg.seed = args.seed
    if args.max_iters is not None:
        cfg.max_iters = args.max_iters
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, load_dataset(args.data, "train"), load_dataset(args.data, "val"))
    (out / "history.csv").write_text(result.history.to_csv())
    save_checkpoint(result.best, out / "best.ckpt")
    save_checkpoint(result.final, out / "final.ckpt")
    print(f"best mean dice {result.best.mean_dice:.4f} at iteration {result.best.iteration}; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    nets = restore(load_checkpoint(args.checkpoint))
    report = evaluate_dataset(nets, load_dataset(args.data, args.split), args.threshold)
    if args.format in ("csv", "both"):
        sys.stdout.write(report.to_csv())
    if args.format in ("table", "both"):
        print(report.table())
    return EXIT_OK


def cmd_predict(args) -> int:
    nets = restore(load_checkpoint(args.checkpoint))
    src = load_volume(args.volume)
    channels = nets.segmentors[0].spec.in_channels
    if src.dtype != "f32" or src.dims[0] != channels:
        raise DataError(f"expected a float32 volume with {channels} channels, got {src.dtype} {src.dims}")
    image, _ = prepare_volume(src, None)
    probs = predict_volume(nets, image)
    label = restack([threshold(p, args.threshold) for p in probs], {"kind": "label", "source": Path(args.volume).name})
    save_volume(label, args.out)
    print(f"wrote label volume {label.dims} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.error:.3e} {r.name}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise NumericFailure(f"gradcheck failed for {len(failed)} checks (tolerance {TOLERANCE}): {', '.join(failed)}")
    print(f"all {len(results)} checks below {TOLERANCE}")
    return EXIT_OK


def run_ablation(base: RunConfig, data_dir, out_dir, seeds, variants=ABLATION_VARIANTS, split="test"):
    """Train every variant for every seed; returns rows (variant, seed, per-class dice)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_h, val_h, eval_h = (load_dataset(data_dir, s) for s in ("train", "val", split))
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = dataclasses.replace(base.train, variant=variant, seed=seed)
            log.info("ablate: %s seed %d", variant, seed)
            result = train(cfg, train_h, val_h)
            save_checkpoint(result.best, out / f"{variant}_seed{seed}.ckpt")
            (out / f"{variant}_seed{seed}_history.csv").write_text(result.history.to_csv())
            report = evaluate_dataset(restore(result.best), eval_h)
            rows.append((variant, seed, report.dice))
    return rows


def ablation_table(rows) -> tuple[str, str]:
    """(per-run CSV, per-variant summary table averaged over seeds)."""
    k = len(rows[0][2])
    dice_cols = ",".join(f"dice_c{i}" for i in range(k))
    csv = [f"variant,seed,{dice_cols},mean"]
    for variant, seed, dice in rows:
        csv.append(f"{variant},{seed}," + ",".join(f"{d:.6f}" for d in dice) + f",{np.mean(dice):.6f}")
    header = f"{'variant':<12}" + "".join(f"{f'class {i}':>10}" for i in range(k)) + f"{'mean':>10}"
    lines = [header]
    for variant in dict.fromkeys(r[0] for r in rows):
        d = np.mean([r[2] for r in rows if r[0] == variant], axis=0)
        lines.append(f"{variant:<12}" + "".join(f"{v:10.4f}" for v in d) + f"{d.mean():10.4f}")
    return "\n".join(csv) + "\n", "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    base = _run_config(args.config)
    if args.max_iters is not None:
        base.train.max_iters = args.max_iters
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = run_ablation(base, args.data, args.out, seeds, split=args.split)
    csv, table = ablation_table(rows)
    Path(args.out, "ablation.csv").write_text(csv)
    Path(args.out, "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segan", description="Adversarial segmentation toolkit (numpy).")
    p.add_argument("--print-defaults", action="store_true", help="list every config key with defaults and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic nested-region dataset and manifest")
    g.add_argument("--spec", help="key=value file with synth.* keys")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train one variant; writes history.csv, best.ckpt, final.ckpt")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-iters", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on whole volumes of one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "test"), default="val")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--format", choices=("csv", "table", "both"), default="csv")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="segment one image volume into a u8 label volume")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--volume", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss chain")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train all architecture variants and compare Dice")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--seed", type=int, default=0, help="first seed")
    a.add_argument("--max-iters", type=int)
    a.add_argument("--split", choices=("val", "test"), default="test")
    a.set_defaults(func=cmd_ablate)
    return p


def _fail(kind: str, code: int, msg) -> int:
    text = " ".join(str(msg).split())
    print(f"error kind={kind} msg={text}", file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        if args.print_defaults:
            print(defaults_table())
            return EXIT_OK
        if not args.command:
            raise UsageError("no command given")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (DataError, SegvError, OSError, KeyError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except TrainingDiverged as exc:
        return _fail("numeric", EXIT_NUMERIC, f"{exc} (iter={exc.iteration} term={exc.term})")
    except NumericFailure as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail("usage", EXIT_USAGE, exc)


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
