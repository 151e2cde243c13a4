"""Command-line entry point: ``mfnerf {train,render,eval,count-params,hash-stats}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 diverged training.
Every failure prints a single line starting with ``error:`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import checkpoint_load
from .config import load_config
from .encoding import collision_stats, count_parameters
from .errors import DataError, MFNeRFError, ShapeError
from .grid import EncodingConfig
from .metrics import psnr, ssim
from .scene import (
    Camera,
    OracleScene,
    load_nerf_synthetic,
    make_image2d_dataset,
    oracle_dataset,
    oracle_views,
    render_oracle,
    sample_image,
    save_png,
)
from .trainer import ImageFitTask, RayTask, format_float, render_camera, train

MODES = ("nerf3d", "image2d", "oracle3d")
TABLE_N = (1, 2, 4, 8, 16)
TABLE_LOG_T = (20, 21, 22, 23)


class _Parser(argparse.ArgumentParser):
    """argparse with the single-line ``error:`` contract and exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mfnerf", description="Mixed-feature hash encoding for radiance fields")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="optimise a scene or image and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=MODES, default="nerf3d")
    t.add_argument("--data", help="dataset directory (nerf3d), image file (image2d) or scene spec (oracle3d)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV (default: <out>.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true", help="serial path; throughput column written as nan")

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--pose", default="0", help="test-view index or camera JSON file")
    r.add_argument("--data", help="dataset directory whose test split supplies indexed poses (nerf3d)")
    r.add_argument("--split", default="test")
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="dataset directory, image file or scene spec, as for train")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)

    c = sub.add_parser("count-params", help="table sizes and parameter totals")
    c.add_argument("--config", required=True)
    c.add_argument("--table", action="store_true", help="N x T grid of total scalars in millions")

    h = sub.add_parser("hash-stats", help="collision histograms on a probe lattice")
    h.add_argument("--config", required=True)
    h.add_argument("--probe", type=int, required=True)
    h.add_argument("--out", required=True)
    return p


# --------------------------------------------------------------------------
# data plumbing shared by train / render / eval


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def _image_task(data):
    return ImageFitTask(make_image2d_dataset(sample_image() if data is None else _read_image(data)))


def _oracle_scene(data) -> OracleScene:
    if data is None:
        return OracleScene()
    try:
        return OracleScene.loads(Path(data).read_text())
    except FileNotFoundError:
        raise DataError(f"missing file: {data}") from None


def _require(value, what):
    if value is None:
        raise DataError(f"--data is required for {what}")
    return value


def cmd_train(args) -> int:
    overrides = {"seed": args.seed}
    run = load_config(args.config, overrides)
    if args.mode == "image2d" and run.encoding.dim != 2:
        if "dim" in run.raw:
            raise DataError("image2d mode needs dim = 2")
        run = load_config(args.config, {**overrides, "dim": 2})
    elif args.mode != "image2d" and run.encoding.dim != 3:
        raise DataError(f"{args.mode} mode needs dim = 3")

    if args.mode == "image2d":
        task = _image_task(args.data)
    elif args.mode == "nerf3d":
        task = RayTask(load_nerf_synthetic(_require(args.data, "nerf3d"), "train", scale=run.scale))
    else:
        scene = _oracle_scene(args.data)
        task = RayTask(oracle_dataset(scene, oracle_views("train", run.views, run.size)))
        task.kind = "oracle3d"
        base_meta = task.meta
        task.meta = lambda: {**base_meta(), "scene": scene.dumps(), "views": run.views, "size": run.size}

    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    state, rows = train(task, run.encoding, run.train, metrics_path=metrics, checkpoint_path=out,
                        deterministic=args.deterministic)
    if not rows:  # zero-step runs still leave a checkpoint behind
        from .checkpoint import checkpoint_save

        checkpoint_save(out, state)
    final = rows[-1] if rows else None
    summary = f"step {state.step}"
    if final:
        summary += f" loss {format_float(final['loss'])} psnr {format_float(final['psnr'])}"
    print(f"{summary} -> {out}")
    return 0


def _camera_from_file(path, meta) -> Camera:
    try:
        doc = json.loads(Path(path).read_text())
        c2w = np.asarray(doc["transform_matrix"], dtype=np.float64)
        fov = float(doc["camera_angle_x"])
        w, h = int(doc.get("width", 64)), int(doc.get("height", doc.get("width", 64)))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed pose file {path}: {exc}") from None
    scale = meta["box_scale"]
    return Camera(c2w, fov, w, h, meta["near"] / scale, meta["far"] / scale)


def _test_cameras(state, data, split):
    """Cameras and ground-truth images of a split, per checkpoint mode."""
    meta = state.meta
    if meta["mode"] == "oracle3d":
        scene = _oracle_scene(data) if data else OracleScene.loads(meta["scene"])
        cams = oracle_views(split, meta["views"], meta["size"])
        return cams, lambda i: render_oracle(scene, cams[i])
    ds = load_nerf_synthetic(_require(data, "nerf3d checkpoints"), split, background=tuple(meta["background"]),
                             scale=1.0 / (3.0 * meta["box_scale"]))
    return ds.cameras, lambda i: ds.images[i]


def cmd_render(args) -> int:
    state = checkpoint_load(args.ckpt)
    if state.meta.get("mode") == "image2d":
        image = ImageFitTask(make_image2d_dataset(np.zeros((state.meta["height"], state.meta["width"], 3))))
        save_png(args.out, image.predict(state))
        return 0
    if args.pose.lstrip("-").isdigit():
        cams, _ = _test_cameras(state, args.data, args.split)
        index = int(args.pose)
        if not 0 <= index < len(cams):
            raise DataError(f"pose index {index} outside [0, {len(cams)})")
        camera = cams[index]
    else:
        camera = _camera_from_file(args.pose, state.meta)
    save_png(args.out, render_camera(state, camera))
    return 0


def _ssim_or_nan(a, b):
    try:
        return ssim(a, b)
    except ShapeError:
        return math.nan


def cmd_eval(args) -> int:
    state = checkpoint_load(args.ckpt)
    if state.meta.get("mode") == "image2d":
        task = _image_task(args.data)
        if (task.task.height, task.task.width) != (state.meta["height"], state.meta["width"]):
            raise DataError("image size differs from the trained image")
        pairs = [(task.predict(state), task.task.image(task.task.targets))]
    else:
        cams, truth = _test_cameras(state, args.data, args.split)
        pairs = [(render_camera(state, cam), truth(i)) for i, cam in enumerate(cams)]
    rows = [(str(i), psnr(pred, gt), _ssim_or_nan(pred, gt)) for i, (pred, gt) in enumerate(pairs)]
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, format_float(p), format_float(s)])
        w.writerow(["mean", format_float(mean_psnr), format_float(mean_ssim)])
    print(f"psnr {format_float(mean_psnr)} ssim {format_float(mean_ssim)} over {len(rows)} image(s)")
    return 0


def millions(scalars: int) -> str:
    """Scalars in millions, two decimals, rounded half up in integer arithmetic."""
    hundredths = (scalars + 5000) // 10000
    return f"{hundredths // 100}.{hundredths % 100:02d} M"


def params_grid(base: EncodingConfig) -> dict:
    """Total scalars for N in TABLE_N and T = 2^20..2^23, other fields from ``base``."""
    grid = {}
    for n in TABLE_N:
        for k in TABLE_LOG_T:
            cfg = EncodingConfig(L=base.L, N=n, T=2**k, F=base.F, N_min=base.N_min, N_max=base.N_max, dim=base.dim)
            grid[n, k] = count_parameters(cfg)[1]
    return grid


def cmd_count_params(args) -> int:
    enc = load_config(args.config).encoding
    if args.table:
        grid = params_grid(enc)
        print("N," + ",".join(f"2^{k}" for k in TABLE_LOG_T))
        for n in TABLE_N:
            print(f"{n}," + ",".join(millions(grid[n, k]) for k in TABLE_LOG_T))
        return 0
    print("table,finest_resolution,entries,scalars,bytes")
    for n, cap in enumerate(enc.capacities(), start=1):
        res = enc.resolutions[enc.group_finest_level(n) - 1]
        print(f"{n},{res},{cap},{cap * enc.F},{cap * enc.F * 4}")
    entries, scalars = count_parameters(enc)
    print(f"total,,{entries},{scalars},{scalars * 4}")
    return 0


def cmd_hash_stats(args) -> int:
    enc = load_config(args.config).encoding
    if args.probe < 1:
        raise DataError("--probe must be >= 1")
    stats = collision_stats(enc, args.probe)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["table", "capacity", "probes", "hits_per_entry", "entries"])
        for s in stats:
            for k in sorted(s.histogram):
                w.writerow([s.table, s.capacity, s.probes, k, s.histogram[k]])
    for s in stats:
        print(f"table {s.table}: capacity {s.capacity} load {format_float(s.load_factor)} "
              f"occupied {s.occupied} multi-hit {s.multi_hit_entries}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "hash-stats": cmd_hash_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except MFNeRFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
