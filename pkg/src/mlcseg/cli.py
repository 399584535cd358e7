"""Command-line entry point wiring the engine into reproducible runs.

Every command that writes artifacts drops a run manifest (JSON) in its
output directory recording the command, arguments, seed, and the resolved
model config, so a run can be reproduced from the manifest alone.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import checkpoint, data, metrics, network, optim
from .config import INPUT_DIVISOR, config_to_dict, default_config, load_config, save_config
from .seeding import derive_seed


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_config(path):
    return load_config(path) if path else default_config()


def _write_run_manifest(out_dir, command: str, args: argparse.Namespace, cfg,
                        started: str) -> None:
    payload = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "out_dir": str(out_dir),
        "started_at": started,
        "finished_at": _now(),
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "resolved_config": config_to_dict(cfg) if cfg is not None else None,
    }
    with open(Path(out_dir) / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=str)
        fh.write("\n")


def cmd_describe(args) -> int:
    started = _now()
    cfg = _resolve_config(args.config)
    text = network.describe_model(cfg)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "describe.txt").write_text(text + "\n", encoding="utf-8")
        _write_run_manifest(out, "describe", args, cfg, started)
    return 0


def cmd_synth(args) -> int:
    started = _now()
    samples = data.synth_dataset(args.n, args.size, args.seed, args.style)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = data.save_dataset(samples, out)
    print(f"wrote {len(samples)} {args.style} samples of {args.size}x{args.size} to {manifest}")
    _write_run_manifest(out, "synth", args, None, started)
    return 0


def _predict_samples(cfg, params, samples, batch_size: int):
    preds = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        images = np.stack([s.image for s in batch])
        preds.extend(network.predict_map(params, images, cfg))
    return preds


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve_config(args.config)
    samples = data.load_dataset(args.data)
    by_id = {s.id: s for s in samples}
    plan = data.kfold_split([s.id for s in samples], args.folds,
                            derive_seed(args.seed, "split"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_fold_plan(plan, out / "folds.tsv")
    save_config(cfg, out / "config.json")
    if args.fold_index is None:
        fold_indices = range(args.folds)
    else:
        if not 0 <= args.fold_index < args.folds:
            raise ValueError(f"--fold-index {args.fold_index} outside [0, {args.folds})")
        fold_indices = [args.fold_index]
    fold_f1s = []
    for fold in fold_indices:
        fold_dir = out / f"fold{fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        train_samples = [by_id[i] for i in plan.train_ids(fold)]
        val_samples = [by_id[i] for i in plan.test_ids(fold)]
        params = network.init_params(cfg, derive_seed(args.seed, f"init:fold{fold}"))
        run = optim.TrainConfig(max_epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                                seed=derive_seed(args.seed, f"run:fold{fold}"),
                                augment=args.augment)
        log_path = fold_dir / "loss_log.tsv"
        log_path.unlink(missing_ok=True)
        result = optim.train(cfg, params, train_samples, val_samples, run, log_path=log_path)
        checkpoint.save_checkpoint(fold_dir / "checkpoint.mlcs", result.params)
        preds = _predict_samples(cfg, result.params, val_samples, args.batch)
        report = metrics.evaluate_pairs(
            [(s.id, p, s.mask) for s, p in zip(val_samples, preds)], args.threshold)
        (fold_dir / "report.tsv").write_text(metrics.report_to_text(report), encoding="utf-8")
        fold_f1s.append([r["f1"] for r in report.rows])
        print(f"fold {fold}: {len(train_samples)} train / {len(val_samples)} held out, "
              f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.6f}), "
              f"mean F1 {report.mean_f1:.4f}")
    if len(fold_f1s) > 1:
        agg = metrics.aggregate(fold_f1s)
        summary = f"mean_f1\t{agg['mean_f1']:.6f}\nstd_f1\t{agg['std_f1']:.6f}\n"
        (out / "summary.tsv").write_text(summary, encoding="utf-8")
        print(f"cross-fold F1 {agg['mean_f1']:.4f} +/- {agg['std_f1']:.4f}")
    _write_run_manifest(out, "train", args, cfg, started)
    return 0


def _pad_to_multiple(image: np.ndarray, divisor: int):
    _, h, w = image.shape
    ph = (divisor - h % divisor) % divisor
    pw = (divisor - w % divisor) % divisor
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return image, h, w


def cmd_infer(args) -> int:
    started = _now()
    cfg = _resolve_config(args.config)
    params = checkpoint.load_checkpoint(args.checkpoint)
    network.validate_params(cfg, params)
    gt = {}
    if args.data:
        gt = {s.id: s for s in data.load_dataset(args.data)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        sid = Path(path).stem
        image = data.load_image(path)
        _, h, w = image.shape
        if (h % INPUT_DIVISOR or w % INPUT_DIVISOR) and not args.pad:
            raise ValueError(
                f"{path}: extents {h}x{w} not divisible by {INPUT_DIVISOR}; pass --pad to "
                f"reflect-pad and crop")
        padded, h, w = _pad_to_multiple(image, INPUT_DIVISOR)
        t0 = time.perf_counter()
        prob = network.predict_map(params, padded[None].astype(np.float32), cfg)[0]
        elapsed = time.perf_counter() - t0
        prob = prob[:, :h, :w]
        mask = (prob >= args.threshold).astype(np.float32)
        data.save_mask(out / f"{sid}.png", mask)
        print(f"{sid}: {elapsed * 1000.0:.1f} ms, foreground {mask.mean():.3f}")
        if args.overlay:
            if sid not in gt:
                raise ValueError(
                    f"--overlay needs a ground-truth mask for '{sid}'; pass --data with a "
                    f"manifest covering it")
            overlay = metrics.render_overlay(mask, gt[sid].mask, image)
            data.save_image(out / f"{sid}_overlay.png", overlay)
    _write_run_manifest(out, "infer", args, cfg, started)
    return 0


def cmd_eval(args) -> int:
    started = _now()
    records = data.load_manifest(args.data)
    pred_dir = Path(args.pred)
    pairs = []
    for sid, image_path, mask_path in records:
        pred_path = pred_dir / f"{sid}.png"
        if not pred_path.exists():
            raise ValueError(f"no prediction for '{sid}' at {pred_path}")
        gt = data.load_sample(image_path, mask_path, sid)
        pairs.append((sid, data.load_gray(pred_path), gt.mask))
    report = metrics.evaluate_pairs(pairs, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(metrics.report_to_text(report), encoding="utf-8")
    for row in report.rows:
        print(f"{row['id']}: precision {row['precision']:.4f} recall {row['recall']:.4f} "
              f"f1 {row['f1']:.4f}")
    print(f"mean F1 {report.mean_f1:.4f} +/- {report.std_f1:.4f} "
          f"at threshold {report.threshold}")
    _write_run_manifest(out, "eval", args, None, started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlcseg",
        description="Multi-level contextual binary segmentation: train, infer, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="print the layer table, totals, and receptive fields")
    p.add_argument("--config", help="model config JSON (default: built-in architecture)")
    p.add_argument("--out", help="also write describe.txt and a run manifest here")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=16, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square image size, multiple of 32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", choices=data.SYNTH_STYLES, default="blobs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with k-fold cross-validation")
    p.add_argument("--config", help="model config JSON (default: built-in architecture)")
    p.add_argument("--data", required=True, help="dataset manifest (id, image, mask per line)")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold-index", type=int, default=None,
                   help="train only this fold (default: all)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--augment", action="store_true",
                   help="random flips and rescaling during training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict masks for images")
    p.add_argument("images", nargs="+", help="input image paths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="model config JSON (default: built-in architecture)")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlay", action="store_true",
                   help="also write agreement overlays (needs --data for ground truth)")
    p.add_argument("--pad", action="store_true",
                   help="reflect-pad inputs to a multiple of 32, crop predictions back")
    p.add_argument("--data", help="manifest providing ground-truth masks for --overlay")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted {id}.png masks")
    p.add_argument("--data", required=True, help="ground-truth dataset manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
