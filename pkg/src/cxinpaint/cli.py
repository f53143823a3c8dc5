"""Command-line entry points: patch extraction, training, inpainting,
metric evaluation, and the 2AFC study service.

Exit codes: 2 I/O error, 3 malformed manifest/config, 4 NaN training
abort, 5 image size mismatch. Every command that takes --seed is
bit-reproducible on rerun.

The --config file is UTF-8 JSON with the sections below (all optional,
unknown keys rejected):

    {
      "seed": 1234,
      "model":    {... ModelConfig fields ...},
      "schedule": {... TrainSchedule fields ...},
      "loss":     {"lambda_l2": 0.998, "lambda_adv": 0.002, "reduction": "mean"},
      "adam":     {"lr": 0.0002, "beta1": 0.5, "beta2": 0.999, "epsilon": 1e-8},
      "data":     {"val_fraction": 0.05, "fill": 0.0}
    }
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from . import metrics as M
from .loss import LossWeights, MaskSpec
from .models import (Checkpoint, CheckpointError, ConfigError, ModelConfig,
                     build_discriminator, build_generator, load_checkpoint,
                     save_checkpoint)
from .optim import (Trainer, TrainSchedule, TrainingError, read_trace,
                    write_trace)
from .study import StudyConfigError, StudyServer, read_pairs_manifest
from .tensor import ContractError, Rng, Tensor

EXIT_IO = 2
EXIT_MALFORMED = 3
EXIT_NAN = 4
EXIT_SIZE = 5


class SizeMismatchError(RuntimeError):
    pass


def _expect_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def load_run_config(path) -> dict:
    """Parse and validate the JSON run configuration."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise D.IngestError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    _expect_keys(raw, ("seed", "model", "schedule", "loss", "adam", "data"),
                 "config")
    model_fields = [f.name for f in dataclasses.fields(ModelConfig)]
    sched_fields = [f.name for f in dataclasses.fields(TrainSchedule)]
    _expect_keys(raw.get("model", {}), model_fields, "config.model")
    _expect_keys(raw.get("schedule", {}), sched_fields, "config.schedule")
    _expect_keys(raw.get("loss", {}),
                 ("lambda_l2", "lambda_adv", "reduction"), "config.loss")
    _expect_keys(raw.get("adam", {}),
                 ("lr", "beta1", "beta2", "epsilon"), "config.adam")
    _expect_keys(raw.get("data", {}), ("val_fraction", "fill"), "config.data")
    return {
        "seed": int(raw.get("seed", 0)),
        "model": ModelConfig(**raw.get("model", {})),
        "schedule": TrainSchedule(**raw.get("schedule", {})),
        "loss": raw.get("loss", {}),
        "adam": raw.get("adam", {}),
        "data": raw.get("data", {}),
    }


def cmd_extract_patches(args) -> int:
    records = D.read_manifest(args.manifest)
    records.sort(key=lambda r: r.image)
    boxes = D.LungBoxes(*json.loads(Path(args.boxes).read_text())) \
        if args.boxes else D.LungBoxes()
    rng = Rng(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "patch_index.csv"
    store_path = out_dir / "patches.cxpd"
    all_patches = []
    try:
        for i, rec in enumerate(records):
            all_patches.extend(D.extract_patches(
                rec, boxes, args.patches_per_image, args.patch_size,
                rng.child(i), images_dir=args.images_dir))
        D.write_patch_index(index_path, all_patches)
        if args.format == "png":
            patches_dir = out_dir / "patches"
            patches_dir.mkdir(exist_ok=True)
            for p in all_patches:
                D.save_png(patches_dir / f"{p.patch_id.replace(':', '_')}.png",
                           p.pixels)
        else:
            D.save_patch_store(store_path, all_patches)
    except Exception:
        for leftover in (index_path, store_path):
            leftover.unlink(missing_ok=True)
        raise
    print(f"extracted {len(all_patches)} patches from {len(records)} images "
          f"-> {out_dir}")
    return 0


def _load_store_arg(data_arg) -> tuple:
    path = Path(data_arg)
    if path.is_dir():
        path = path / "patches.cxpd"
    return D.load_patch_store(path)


def _latest_epoch_checkpoint(out_dir: Path):
    found = sorted(out_dir.glob("epoch_*.ckpt"))
    return found[-1] if found else None


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels, records = _load_store_arg(args.data)
    model_cfg: ModelConfig = cfg["model"]
    schedule: TrainSchedule = cfg["schedule"]
    weights = LossWeights(cfg["loss"].get("lambda_l2", 0.998),
                          cfg["loss"].get("lambda_adv", 0.002))
    reduction = cfg["loss"].get("reduction", "mean")
    mask = MaskSpec(model_cfg.patch_size, model_cfg.margin_width,
                    model_cfg.margin_weight)
    if pixels.shape[-1] != model_cfg.image_size:
        raise SizeMismatchError(
            f"patch store holds {pixels.shape[-1]}px patches, model expects "
            f"{model_cfg.image_size}px")

    root = Rng(cfg["seed"])
    val_fraction = float(cfg["data"].get("val_fraction", 0.05))
    fill = float(cfg["data"].get("fill", 0.0))
    train_recs, val_recs, _ = D.split_dataset(
        records, (1.0 - val_fraction, val_fraction, 0.0), root.child(4),
        group_key=lambda r: r.image_id)
    by_id = {r.patch_id: i for i, r in enumerate(records)}
    train_px = pixels[[by_id[r.patch_id] for r in train_recs]]
    val_px = pixels[[by_id[r.patch_id] for r in val_recs]]

    resume_from = _latest_epoch_checkpoint(out_dir) if args.resume else None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        gen, disc = ckpt.generator, ckpt.discriminator
    else:
        gen = build_generator(model_cfg, root.child(1))
        disc = build_discriminator(model_cfg, root.child(2))
    trainer = Trainer(gen, disc, schedule, weights, mask, root.child(3),
                      lr=cfg["adam"].get("lr", 0.0002),
                      beta1=cfg["adam"].get("beta1", 0.5),
                      beta2=cfg["adam"].get("beta2", 0.999),
                      epsilon=cfg["adam"].get("epsilon", 1e-8),
                      fill=fill, l2_reduction=reduction)
    best_val = None
    if resume_from is not None:
        trainer.restore(ckpt.counters, ckpt.extra)
        best_val = ckpt.counters.get("best_val_l2")
        print(f"resumed from {resume_from} at epoch {trainer.state.epoch}")

    trace_path = out_dir / "trace.csv"
    if not args.resume or not trace_path.exists():
        write_trace(trace_path, [])
    while trainer.state.epoch < schedule.total_epochs:
        before = len(trainer.state.records)
        trainer.train_epoch(train_px)
        epoch = trainer.state.epoch
        val = trainer.validation_l2(val_px) if len(val_px) else None
        counters = trainer.counters()
        counters["val_l2"] = val
        if val is not None and (best_val is None or val < best_val):
            best_val = val
        counters["best_val_l2"] = best_val
        ckpt_path = out_dir / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(ckpt_path, gen, disc, trainer.optimizer_arrays(),
                        counters)
        if best_val is not None and val == best_val:
            shutil.copyfile(ckpt_path, out_dir / "best.ckpt")
        write_trace(trace_path, trainer.state.records[before:], append=True)
        msg = f"epoch {epoch}/{schedule.total_epochs} " \
              f"phase={schedule.phase(epoch - 1)}"
        if val is not None:
            msg += f" val_l2={val:.6f}"
        print(msg)
    print(f"training complete: {trainer.state.iteration} iterations "
          f"-> {out_dir}")
    return 0


def _load_for_inpaint(args, cfg: ModelConfig):
    u8 = D.load_grayscale_u8(args.image)
    if args.crop:
        try:
            cx, cy = (int(v) for v in args.crop.split(","))
        except ValueError:
            raise ConfigError(f"--crop must be 'x,y', got {args.crop!r}")
        s = cfg.image_size
        if cx < 0 or cy < 0 or cy + s > u8.shape[0] or cx + s > u8.shape[1]:
            raise SizeMismatchError(
                f"crop {args.crop} of {s}px leaves image {u8.shape[1]}x"
                f"{u8.shape[0]}")
        u8 = u8[cy:cy + s, cx:cx + s]
    if u8.shape != (cfg.image_size, cfg.image_size):
        raise SizeMismatchError(
            f"image is {u8.shape[1]}x{u8.shape[0]}, checkpoint expects "
            f"{cfg.image_size}x{cfg.image_size} (use --crop for larger scans)")
    return u8


def cmd_inpaint(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.checksum_failures:
        print(f"warning: checksum mismatch in tensors: "
              f"{', '.join(ckpt.checksum_failures)}", file=sys.stderr)
    cfg = ckpt.config
    u8 = _load_for_inpaint(args, cfg)
    normalized = (2.0 * (u8.astype(np.float64) / 255.0) - 1.0)
    ctx, _, _ = D.mask_batch(normalized[None, None].astype(
        np.float64 if cfg.dtype == "float64" else np.float32))
    fake, _ = ckpt.generator.forward(Tensor(ctx), train=False)
    center_u8 = D.denormalize_to_u8(fake.array[0, 0])
    lo, hi = D.center_bounds(cfg.image_size)
    out_u8 = u8.copy()
    out_u8[lo:hi, lo:hi] = center_u8
    Image.fromarray(out_u8, mode="L").save(args.out, format="PNG")
    print(f"reconstruction -> {args.out}")
    if args.emit_diff:
        dmap = M.diff_map(Tensor(u8.astype(np.float64)),
                          Tensor(out_u8.astype(np.float64)))
        diff_path = args.diff_out or str(
            Path(args.out).with_suffix("")) + "_diff.png"
        Image.fromarray(np.rint(dmap.array).astype(np.uint8), mode="L") \
            .save(diff_path, format="PNG")
        print(f"diff map -> {diff_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    pixels, records = _load_store_arg(args.patch_index)
    if pixels.shape[-1] != cfg.image_size:
        raise SizeMismatchError(
            f"patches are {pixels.shape[-1]}px, checkpoint expects "
            f"{cfg.image_size}px")
    dt = np.float64 if cfg.dtype == "float64" else np.float32
    report = M.MetricsReport()
    lo, hi = D.center_bounds(cfg.image_size)
    batch = 32
    for start in range(0, pixels.shape[0], batch):
        chunk = pixels[start:start + batch].astype(dt, copy=False)
        ctx, tgt, _ = D.mask_batch(np.ascontiguousarray(chunk))
        fake, _ = ckpt.generator.forward(Tensor(ctx), train=False)
        for j in range(chunk.shape[0]):
            rec = records[start + j]
            if args.full_patch:
                recon = D.composite_center(Tensor(chunk[j]),
                                           Tensor(fake.array[j]))
                a = chunk[j, 0]
                b = recon.array[0]
            else:
                a = tgt[j, 0]
                b = fake.array[j, 0]
            a8 = D.denormalize_to_u8(a).astype(np.float64)
            b8 = D.denormalize_to_u8(b).astype(np.float64)
            report.add(rec.patch_id, Tensor(a8), Tensor(b8))
    report.write_csv(args.report)
    summary = report.summary()
    print(f"{len(report.rows)} pairs: "
          f"mse {summary['mse'][0]:.2f}+-{summary['mse'][1]:.2f}, "
          f"psnr {summary['psnr'][0]:.2f}+-{summary['psnr'][1]:.2f} dB, "
          f"ssim {summary['ssim'][0]:.4f}+-{summary['ssim'][1]:.4f} "
          f"-> {args.report}")
    return 0


def cmd_serve_study(args) -> int:
    pairs = read_pairs_manifest(args.pairs_manifest)
    server = StudyServer(pairs, results_path=args.results_path,
                         seed=args.seed, host=args.host, port=args.port,
                         ui_dir=args.ui_dir)
    print(f"study service on http://{args.host}:{server.port} "
          f"({len(pairs)} pairs)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cxinpaint",
        description="Context-encoder inpainting for chest X-ray patches")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-patches",
                       help="cut lung-area patches from manifest images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patches-per-image", type=int, default=20)
    p.add_argument("--patch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--boxes", help="JSON file: [[x0,y0,x1,y1],[x0,y0,x1,y1]]")
    p.add_argument("--format", choices=("packed", "png"), default="packed")
    p.set_defaults(func=cmd_extract_patches)

    p = sub.add_parser("train", help="train generator and discriminator")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True,
                   help="patch store (.cxpd) or extraction output directory")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inpaint", help="reconstruct the central patch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", help="x,y top-left corner inside a larger scan")
    p.add_argument("--emit-diff", action="store_true")
    p.add_argument("--diff-out")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("eval", help="reconstruction metrics over a patch set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch-index", required=True,
                   help="patch store (.cxpd) or extraction output directory")
    p.add_argument("--report", required=True)
    p.add_argument("--full-patch", action="store_true",
                   help="measure the composited image, not just the center")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve-study", help="run the 2AFC observer study API")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--pairs-manifest", required=True)
    p.add_argument("--results-path", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ui-dir", help="serve a built study UI from this directory")
    p.set_defaults(func=cmd_serve_study)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (D.IngestError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (D.ManifestError, ConfigError, StudyConfigError, ContractError,
            CheckpointError, D.ExtractionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MALFORMED
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NAN
    except SizeMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SIZE


if __name__ == "__main__":
    sys.exit(main())
