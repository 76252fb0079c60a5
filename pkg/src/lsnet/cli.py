"""``lsnet`` command line: generate, train, eval, detect and ablate.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from lsnet import config as cfgmod
from lsnet import postprocess, synthdata, training
from lsnet.errors import ConfigError, ContractError, DivergenceError
from lsnet.gridcodec import LineSegment
from lsnet.metrics import format_table
from lsnet.model import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("lsnet")


def _manifest_path(path) -> Path:
    path = Path(path)
    return path / "manifest.jsonl" if path.is_dir() else path


def _load_config(args):
    doc = None
    if args.config is not None:
        cfg = cfgmod.load_run_config(args.config)
        doc = cfg.document
    doc = doc if doc is not None else {"version": cfgmod.CONFIG_VERSION}
    return cfgmod.build_run_config(cfgmod.apply_overrides(doc, getattr(args, "set", None)))


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    existed = out.exists()
    if args.bundled:
        n, seed = synthdata.BUNDLED_SETS[args.bundled]
    else:
        n, seed = args.n_images, args.seed
    if n < 1:
        raise ConfigError(f"--n-images must be >= 1, got {n}")
    try:
        records = synthdata.generate_records(n, seed, cfg.scene, cfg.image_size)
        path = synthdata.write_manifest(records, out)
    except BaseException:
        # leave nothing half-written behind
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        else:
            shutil.rmtree(out / "images", ignore_errors=True)
            (out / "manifest.jsonl").unlink(missing_ok=True)
        raise
    print(f"wrote {n} images and {path}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def _split(entries, fraction):
    n_val = max(1, int(round(len(entries) * fraction)))
    if len(entries) <= n_val:
        raise ContractError(f"cannot hold out {n_val} validation images from {len(entries)}")
    return entries[:-n_val], entries[-n_val:]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train_entries = synthdata.read_manifest(_manifest_path(args.data))
    if args.val is not None:
        val_entries = synthdata.read_manifest(_manifest_path(args.val))
    else:
        train_entries, val_entries = _split(train_entries, cfg.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", cfg.resolved())
    result = training.train(
        train_entries, val_entries, cfg.model, cfg.train, out_dir=out, resume=args.resume,
        callback=lambda e: print(f"step {e['step']:6d}  train {e['train_total']:.4f}  val {e['val_total']:.4f}",
                                 flush=True),
    )
    print(f"stopped ({result.stopped}) at step {result.step}; best val {result.best_val:.6f} "
          f"at step {result.best_step}; checkpoint {result.checkpoint}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval


def build_report(result, settings: dict) -> dict:
    report = {"version": 1, **result.to_json(), "settings": settings}
    cfgmod.validate_document(report, "eval_report")
    return report


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    wl = args.wl if args.wl is not None else cfg.eval["wl"]
    binarize_spec = args.binarize if args.binarize is not None else cfg.eval["binarize"]
    binarize = cfgmod.parse_binarize(binarize_spec)
    sigma_s = args.sigma_s if args.sigma_s is not None else cfg.eval["sigma_s"]
    if wl < 1:
        raise ConfigError(f"--wl must be >= 1, got {wl}")
    entries = synthdata.read_manifest(_manifest_path(args.manifest))
    if not entries:
        raise ContractError(f"manifest {args.manifest} is empty")
    gt_masks = None
    if args.masks is not None:
        gt_masks = [synthdata.load_image(Path(args.masks) / Path(e.image).name)[..., 0] > 0.5 for e in entries]

    if args.gt_as_prediction:
        size = entries[0].width
        preds = [[LineSegment(*s, confidence=1.0) for s in e.segments] for e in entries]
        gts = gt_masks if gt_masks is not None else [e.segments for e in entries]
        result = training.evaluate_segments(preds, gts, size, wl, binarize, sigma_s)
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --gt-as-prediction is given")
        result = training.evaluate_model(args.checkpoint, entries, wl, binarize, sigma_s,
                                         conf_threshold=cfg.eval["conf_threshold"], gt_masks=gt_masks)
    settings = {"wl": int(wl), "binarize": str(binarize_spec), "sigma_s": float(sigma_s),
                "checkpoint": None if args.checkpoint is None else str(args.checkpoint),
                "manifest": str(args.manifest), "gt_as_prediction": bool(args.gt_as_prediction)}
    report = build_report(result, settings)
    text = format_table([("LS-Net" if not args.gt_as_prediction else "ground truth", result)],
                        f"W_l={wl} binarize={binarize_spec} sigma_s={sigma_s} images={result.n_images}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", report)
        (out / "report.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------------
# detect

OVERLAY_COLOR = np.array([1.0, 0.0, 0.0])


def _read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise FileNotFoundError(f"cannot read image {path}: {exc}") from None


def draw_overlay(image, segments, wl: int = 2) -> np.ndarray:
    """Segments burned into ``image`` with the evaluation rasterizer, shaded by confidence."""
    h, w = image.shape[:2]
    if h != w:
        raise ContractError("overlay expects a square image")
    conf = postprocess.rasterize_segments(segments, wl, w).values[..., None]
    return image * (1.0 - conf) + OVERLAY_COLOR * conf


def cmd_detect(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    image = _read_image(args.image)
    size = model.config.input_size
    h, w = image.shape[:2]
    if (h, w) != (size, size):
        pil = Image.fromarray(np.floor(image * 255 + 0.5).astype(np.uint8))
        resized = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    else:
        resized = image
    segs = training.detect_segments(model, resized[None], conf_threshold=args.threshold)[0]
    sx, sy = w / size, h / size
    segs = [LineSegment(s.x1 * sx, s.y1 * sy, s.x2 * sx, s.y2 * sy, s.confidence) for s in segs]
    payload = {
        "image": str(args.image), "width": w, "height": h, "threshold": args.threshold,
        "segments": [{"x1": s.x1, "y1": s.y1, "x2": s.x2, "y2": s.y2, "confidence": s.confidence} for s in segs],
    }
    if args.json is not None:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.json), payload)
    if args.overlay is not None:
        canvas = resized if (h, w) != (size, size) else image
        in_model = [LineSegment(s.x1 / sx, s.y1 / sy, s.x2 / sx, s.y2 / sy, s.confidence) for s in segs]
        over = draw_overlay(canvas, in_model)
        meta = PngImagePlugin.PngInfo()
        meta.add_text("lsnet:segments", str(len(segs)))
        Path(args.overlay).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.floor(np.clip(over, 0, 1) * 255 + 0.5).astype(np.uint8)).save(args.overlay, pnginfo=meta)
    print(f"{len(segs)} segments detected")
    return EXIT_OK


# ----------------------------------------------------------------------------
# ablate

AXES = ("grids", "regloss", "clsloss", "downsampling")
AXIS_TITLES = {
    "grids": "Ablation axis: lattice parity classes",
    "regloss": "Ablation axis: regression penalty",
    "clsloss": "Ablation axis: classification penalty",
    "downsampling": "Ablation axis: downsampling layer",
}


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    for a in axes:
        if a not in AXES:
            raise ConfigError(f"unknown ablation axis {a!r}; expected one of {', '.join(AXES)}")
    train_entries = synthdata.read_manifest(_manifest_path(args.data))
    if args.val is not None:
        val_entries = synthdata.read_manifest(_manifest_path(args.val))
    else:
        train_entries, val_entries = _split(train_entries, cfg.val_fraction)
    eval_entries = synthdata.read_manifest(_manifest_path(args.eval_data))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.eval["seeds"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # load once; every variant trains on identical records
    train_records = [e.load() for e in train_entries]
    val_records = [e.load() for e in val_entries]
    eval_records = [e.load() for e in eval_entries]
    tables, payload = [], {}
    for axis in axes:
        rows = training.run_ablation_matrix(
            cfg.model, cfg.train, training.ablation_variants(axis), train_records, val_records, eval_records,
            seeds=seeds, wl=args.wl, binarization=cfgmod.parse_binarize(args.binarize), sigma_s=args.sigma_s,
            out_dir=out / axis if args.keep_runs else None,
        )
        tables.append(training.ablation_table(rows, AXIS_TITLES[axis]))
        payload[axis] = [{"name": r.name, "seeds": seeds, "results": [x.to_json() for x in r.results],
                          "mean": {k: getattr(r.mean(), k) for k in ("apr", "arr", "f1")}} for r in rows]
    text = "\n\n".join(tables)
    (out / "ablation.txt").write_text(text + "\n")
    _write_json(out / "ablation.json", payload)
    print(text)
    return EXIT_OK


# ----------------------------------------------------------------------------


def _add_common(p, overrides=True):
    p.add_argument("--config", type=Path, help="run configuration JSON")
    if overrides:
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="cap on worker threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsnet", description="single-shot line segment detector")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset with manifest")
    _add_common(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bundled", choices=sorted(synthdata.BUNDLED_SETS),
                   help="regenerate one of the bundled desk sets (overrides --n-images/--seed)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--data", required=True, type=Path, help="training manifest or its directory")
    p.add_argument("--val", type=Path, help="validation manifest (default: hold out train.val_fraction)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pixel-level evaluation")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--masks", type=Path, help="directory of GT mask PNGs named like the manifest images")
    p.add_argument("--wl", type=int)
    p.add_argument("--binarize", help="otsu or fixed:<t>")
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--gt-as-prediction", action="store_true",
                   help="feed ground-truth segments through the pipeline as predictions")
    p.add_argument("--out", type=Path, help="directory for report.json and report.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="detect segments in one image")
    _add_common(p, overrides=False)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("image", type=Path)
    p.add_argument("--overlay", type=Path)
    p.add_argument("--json", type=Path)
    p.add_argument("--threshold", type=float, default=training.DECODE_THRESHOLD)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("ablate", help="run ablation tables")
    _add_common(p)
    p.add_argument("--axes", default="grids", help=f"comma list from {', '.join(AXES)}")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--eval-data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seeds", help="comma separated seeds (default from config)")
    p.add_argument("--wl", type=int, default=1)
    p.add_argument("--binarize", default="fixed:0.5")
    p.add_argument("--sigma-s", type=float, default=0.0)
    p.add_argument("--keep-runs", action="store_true", help="keep per-variant checkpoints and logs")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
