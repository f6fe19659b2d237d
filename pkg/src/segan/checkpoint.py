"""Checkpoints as one SEGV file: a text manifest record, then one f32 record per array."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .models import NetSpec
from .training import Snapshot, TrainConfig
from .volume_io import SegvError, read_record, write_record

KIND = "segan-checkpoint"


def save_checkpoint(snap: Snapshot, path) -> Path:
    path = Path(path)
    lines = []
    for name, arr in snap.arrays.items():
        role = name.rsplit(".", 1)[-1]
        lines.append(f"{name}\t{','.join(map(str, arr.shape))}\t{role}")
    manifest = np.frombuffer("\n".join(lines).encode("utf-8"), dtype=np.uint8)
    meta = {"kind": KIND, "iteration": str(snap.iteration), "mean_dice": repr(snap.mean_dice),
            "networks": ",".join(snap.specs), **snap.cfg.as_meta()}
    for prefix, spec in snap.specs.items():
        meta.update(spec.as_meta(prefix))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        write_record(fh, manifest if manifest.size else np.zeros(1, np.uint8), meta)
        for name, arr in snap.arrays.items():
            write_record(fh, np.asarray(arr, dtype=np.float32), {"name": name})
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Snapshot:
    buf = Path(path).read_bytes()
    raw, meta, off = read_record(buf)
    if meta.get("kind") != KIND:
        raise SegvError("not a checkpoint (missing kind=segan-checkpoint)", 0)
    entries = [line.split("\t") for line in raw.tobytes().decode("utf-8").splitlines() if line]
    arrays = {}
    for name, shape, _role in entries:
        start = off
        arr, rmeta, off = read_record(buf, off)
        expected = tuple(int(s) for s in shape.split(",")) if shape else ()
        if rmeta.get("name") != name or arr.shape != expected:
            raise SegvError(f"record {rmeta.get('name')!r} {arr.shape} does not match manifest {name} {expected}", start)
        arrays[name] = arr
    if off != len(buf):
        raise SegvError(f"{len(buf) - off} trailing bytes", off)
    specs = {p: NetSpec.from_meta(meta, p) for p in meta["networks"].split(",") if p}
    return Snapshot(TrainConfig.from_meta(meta), int(meta["iteration"]), arrays, specs, float(meta["mean_dice"]))
