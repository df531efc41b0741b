"""Command-line surface.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable/malformed
files, bad shapes), 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis, imaging, training
from .errors import (
    CheckpointError,
    ConfigError,
    ImageError,
    ShapeError,
    TrainingDivergedError,
    UsageError,
)
from .image_io import write_atomic
from .imaging import DegradationSpec, ImageF32, bicubic_resize, degrade, load_image, modcrop, save_image
from .model import HmaConfig, HmaModel, complexity_breakdown, tiled_inference, toy_config
from .training import (
    PRESETS,
    PatchDataset,
    builtin_toy_dataset,
    checkpoint_load,
    checkpoint_save,
    dataset_psnr,
    model_from_checkpoint,
    trace_csv,
    train_loop,
    transfer_parameters,
)

IMAGE_EXTS = (".png", ".ppm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _worker_count(n_jobs: int) -> int:
    cap = os.environ.get("HMA_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n_jobs, limit))


def _read_config(path: str) -> HmaConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return HmaConfig.from_json(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _image_files(folder: str) -> list[str]:
    try:
        names = sorted(os.listdir(folder))
    except OSError as e:
        raise ImageError(f"cannot list {folder}: {e}") from e
    return [os.path.join(folder, n) for n in names if n.lower().endswith(IMAGE_EXTS)]


def _folder_dataset(folder: str, scale: int, patch_lr: int, per_image: int,
                    seed: int) -> PatchDataset:
    pairs = []
    for i, path in enumerate(_image_files(folder)):
        hr = modcrop(load_image(path).to_f32(), scale)
        if hr.height < patch_lr * scale or hr.width < patch_lr * scale:
            continue
        lr = degrade(hr, DegradationSpec(scale))
        pairs.extend(imaging.extract_patches(hr, lr, patch_lr, per_image, seed + i))
    if not pairs:
        raise ImageError(f"no usable training images of at least {patch_lr * scale} px in {folder}")
    return PatchDataset(pairs)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    tc = PRESETS[args.preset]
    total = args.iters if args.iters else tc.total_iters
    tc = training.TrainConfig(
        total_iters=total,
        batch=tc.batch,
        lr0=tc.lr0,
        milestones=[m for m in tc.milestones if m < total],
        patch_lr=tc.patch_lr,
        seed=args.seed,
        augment=tc.augment,
    ).validate()

    if args.data_dir:
        dataset = _folder_dataset(args.data_dir, cfg.scale, tc.patch_lr, args.patches_per_image, args.seed)
    else:
        dataset = builtin_toy_dataset(cfg.scale, tc.patch_lr)

    if args.init_ckpt:
        src = checkpoint_load(args.init_ckpt)
        model, report = transfer_parameters(src, cfg, seed=args.seed)
        print(report.summary())
    else:
        model = HmaModel.init(cfg, seed=args.seed)

    def on_log(it, loss):
        print(f"iter {it:>7d}  loss {loss:.6f}", flush=True)

    def on_milestone(it):
        checkpoint_save(f"{args.out}.it{it}", model, iteration=it)

    result = train_loop(model, dataset, tc, log_every=args.log_every, on_log=on_log,
                        on_milestone=on_milestone)
    checkpoint_save(args.out, model, result.state, result.iterations)
    write_atomic(args.out + ".loss.csv", trace_csv(result.trace).encode("utf-8"))
    print(f"wrote {args.out} after {result.iterations} iterations; "
          f"train-set PSNR {dataset_psnr(model, dataset):.2f} dB")
    return 0


def cmd_upscale(args) -> int:
    model = model_from_checkpoint(checkpoint_load(args.ckpt))
    img = load_image(args.input).to_f32()
    out = tiled_inference(img.data, model, tile=args.tile, overlap=args.overlap)
    save_image(ImageF32(np.clip(out, 0.0, 1.0)).to_u8(), args.output)
    print(f"wrote {args.output} ({out.shape[1]}x{out.shape[0]})")
    return 0


def _eval_one(path: str, model, scale: int, baseline: bool, tile: int, overlap: int):
    hr = load_image(path).to_f32()
    lr = degrade(hr, DegradationSpec(scale))
    if baseline:
        sr = bicubic_resize(lr, hr.height, hr.width, antialias=False)
    else:
        up = tiled_inference(lr.data, model, tile=tile, overlap=overlap)
        sr = ImageF32(np.clip(up[: hr.height, : hr.width], 0.0, 1.0))
    return (os.path.basename(path),
            imaging.psnr_y(sr, hr, crop=scale),
            imaging.ssim_y(sr, hr, crop=scale))


def cmd_eval(args) -> int:
    if not args.ckpt and not args.baseline_bicubic:
        raise UsageError("either --ckpt or --baseline-bicubic is required")
    if args.baseline_bicubic:
        model = None
        scale = args.scale
        if not scale:
            raise UsageError("--scale is required with --baseline-bicubic")
    else:
        model = model_from_checkpoint(checkpoint_load(args.ckpt))
        scale = model.cfg.scale
        if args.scale and args.scale != scale:
            raise ConfigError(f"--scale {args.scale} conflicts with checkpoint scale {scale}")
    files = _image_files(args.hr_dir)
    if not files:
        raise ImageError(f"no PNG/PPM images in {args.hr_dir}")
    workers = _worker_count(len(files))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(
            lambda p: _eval_one(p, model, scale, args.baseline_bicubic, args.tile, args.overlap),
            files,
        ))
    lines = ["image,psnr_db,ssim"]
    for name, p, s in rows:
        lines.append(f"{name},{'inf' if math.isinf(p) else f'{p:.4f}'},{s:.6f}")
    finite = [p for _, p, _ in rows if math.isfinite(p)]
    mean_p = float(np.mean(finite)) if finite else math.inf
    mean_s = float(np.mean([s for _, _, s in rows]))
    lines.append(f"mean,{'inf' if math.isinf(mean_p) else f'{mean_p:.4f}'},{mean_s:.6f}")
    report = "\n".join(lines) + "\n"
    if args.report:
        write_atomic(args.report, report.encode("utf-8"))
    print(report, end="")
    return 0


def cmd_degrade(args) -> int:
    img = load_image(args.input).to_f32()
    out = degrade(img, DegradationSpec(args.scale))
    save_image(out.to_u8(), args.output)
    print(f"wrote {args.output} ({out.width}x{out.height})")
    return 0


def cmd_count(args) -> int:
    cfg = _read_config(args.config) if args.config else toy_config()
    hw = (args.input_size, args.input_size)
    rows = complexity_breakdown(cfg, hw)
    total_p = sum(r[1] for r in rows)
    total_m = sum(r[2] for r in rows)
    width = max(len(r[0]) for r in rows)
    print(f"{'submodule':<{width}}  {'params':>14}  {'multiply-adds':>16}")
    for label, p, m in rows:
        print(f"{label:<{width}}  {p:>14,}  {m:>16,}")
    print(f"{'total':<{width}}  {total_p:>14,}  {total_m:>16,}")
    print(f"total: {total_p / 1e6:.2f}M params, {total_m / 1e9:.2f}G multiply-adds "
          f"at {hw[0]}x{hw[1]} input")
    return 0


def _probe_batch(model, probe_dir: str | None, seed: int) -> np.ndarray:
    gran = model.cfg.pad_granularity
    size = max(gran, (64 // gran) * gran)
    size = min(size, model.cfg.grid_extent * model.cfg.grid_interval)
    if probe_dir:
        files = _image_files(probe_dir)
        if not files:
            raise ImageError(f"no PNG/PPM images in {probe_dir}")
        hr = load_image(files[0]).to_f32()
        lr = degrade(modcrop(hr, model.cfg.scale), DegradationSpec(model.cfg.scale))
        if lr.height < size or lr.width < size:
            raise ImageError(f"probe image {files[0]} smaller than {size} px after degradation")
        patch = lr.data[:size, :size]
    else:
        patch = training.builtin_toy_dataset(model.cfg.scale, size, count=1, seed=seed)[0][0].data
    return patch.transpose(2, 0, 1)[None]


def cmd_cka(args) -> int:
    ckpt_a = checkpoint_load(args.ckpt_a)
    model_a = model_from_checkpoint(ckpt_a)
    probe = _probe_batch(model_a, args.probe_dir, args.seed)
    if args.ckpt_b:
        model_b = model_from_checkpoint(checkpoint_load(args.ckpt_b))
        sel = [f"body.{i}.out" for i in range(model_a.cfg.n_rhtb)]
        sel_b = [f"body.{i}.out" for i in range(model_b.cfg.n_rhtb)]
        fa = analysis.capture_features(model_a, probe, sel)
        fb = analysis.capture_features(model_b, probe, sel_b)
        report = analysis.cka_grid(fa, fb, sel, sel_b)
    else:
        gs = [f"body.{i}.gab.grid.g" for i in range(model_a.cfg.n_rhtb)]
        qs = [f"body.{i}.gab.grid.q" for i in range(model_a.cfg.n_rhtb)]
        feats = analysis.capture_features(model_a, probe, gs + qs)
        report = analysis.cka_grid(feats, feats, gs, qs)
    report.save(args.report)
    print(f"wrote {args.report}")
    return 0


def cmd_transfer(args) -> int:
    src = checkpoint_load(getattr(args, "from"))
    dst_cfg = _read_config(args.to_config)
    model, report = transfer_parameters(src, dst_cfg, seed=args.seed)
    print(report.summary())
    checkpoint_save(args.out, model)
    print(f"wrote {args.out}")
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="hma", description="grid/window-attention super-resolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="JSON architecture config")
    t.add_argument("--data-dir", help="folder of HR images; omit for the bundled toy set")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init-ckpt", help="checkpoint to transfer parameters from")
    t.add_argument("--iters", type=int, help="override the preset iteration count")
    t.add_argument("--patches-per-image", type=int, default=16)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("upscale", help="upscale one image")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--input", required=True)
    u.add_argument("--output", required=True)
    u.add_argument("--tile", type=int, default=64)
    u.add_argument("--overlap", type=int, default=8)
    u.set_defaults(func=cmd_upscale)

    e = sub.add_parser("eval", help="degrade-and-restore metrics over a folder")
    e.add_argument("--ckpt")
    e.add_argument("--hr-dir", required=True)
    e.add_argument("--scale", type=int)
    e.add_argument("--report", help="CSV output path")
    e.add_argument("--tile", type=int, default=64)
    e.add_argument("--overlap", type=int, default=8)
    e.add_argument("--baseline-bicubic", action="store_true",
                   help="score plain bicubic upscaling instead of a model")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("degrade", help="bicubic-downscale one image")
    d.add_argument("--input", required=True)
    d.add_argument("--scale", type=int, required=True)
    d.add_argument("--output", required=True)
    d.set_defaults(func=cmd_degrade)

    c = sub.add_parser("count", help="parameter and multiply-add accounting")
    c.add_argument("--config", help="JSON architecture config (default: toy)")
    c.add_argument("--input-size", type=int, default=64)
    c.set_defaults(func=cmd_count)

    k = sub.add_parser("cka", help="layer-similarity report")
    k.add_argument("--ckpt-a", required=True)
    k.add_argument("--ckpt-b")
    k.add_argument("--probe-dir")
    k.add_argument("--report", required=True)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_cka)

    x = sub.add_parser("transfer", help="seed a new config from a checkpoint")
    x.add_argument("--from", required=True)
    x.add_argument("--to-config", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_transfer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except TrainingDivergedError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ImageError, CheckpointError, ConfigError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
