"""Command-line entry point: ``densesph {profile,detect,eval,augment,synth,selftest}``.

Exit codes: 0 success, 1 validation error (bad input, config or weights),
2 internal invariant violation. Log verbosity is read from ``DENSESPH_LOG``
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data
from . import detector as D
from .blocks import WeightError
from .boxes import Detection, read_detections, write_detections
from .config import ConfigFileError, as_bool, as_int_tuple, load_config
from .metrics import evaluate
from .pipeline import RANDOM_WEIGHT_RANGE, detect_image
from .render import draw_detections

log = logging.getLogger("densesph")

EXIT_OK, EXIT_VALIDATION, EXIT_INVARIANT = 0, 1, 2

# config keys mapped onto DetectorConfig fields and their converters
_MODEL_KEYS = {
    "input_size": int, "num_classes": int, "activation": str, "window": int, "heads": int,
    "mlp_ratio": int, "cbam_reduction": int, "adh": as_bool, "attention_scale": as_bool,
    "widths": as_int_tuple, "csp_depths": as_int_tuple, "dense_layers": int, "growth": int,
}
_RUN_KEYS = {"weights", "seed", "out_dir", "score_thresh", "nms_thresh", "random_weights", "anchors"}


class ValidationError(ValueError):
    pass


def parse_anchors(text: str) -> tuple:
    """``w,h w,h w,h; ...`` with one ``;``-separated group per stride."""
    groups = [g.split() for g in text.split(";")]
    return tuple(tuple(tuple(float(v) for v in pair.split(",")) for pair in g) for g in groups)


def resolve(args: argparse.Namespace) -> tuple[D.DetectorConfig, dict]:
    """Merge the config file (if any) with flag overrides into a model config and run settings."""
    file_values = load_config(args.config) if args.config else {}
    unknown = set(file_values) - set(_MODEL_KEYS) - _RUN_KEYS
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    model = {k: conv(file_values[k]) for k, conv in _MODEL_KEYS.items() if k in file_values}
    if "anchors" in file_values:
        model["anchors"] = parse_anchors(file_values["anchors"])
    cfg = D.DetectorConfig(**model)
    run = {
        "seed": int(file_values.get("seed", 0)),
        "score_thresh": float(file_values.get("score_thresh", 0.25)),
        "nms_thresh": float(file_values.get("nms_thresh", 0.45)),
        "out_dir": file_values.get("out_dir"),
        "weights": file_values.get("weights"),
        "random_weights": as_bool(file_values.get("random_weights", "false")),
    }
    for key in ("seed", "score_thresh", "nms_thresh", "out_dir", "weights"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    if getattr(args, "random_weights", False):
        run["random_weights"] = True
    if not 0.0 < run["score_thresh"] <= 1.0:
        raise ValidationError(f"score threshold {run['score_thresh']} outside (0, 1]")
    if not 0.0 < run["nms_thresh"] < 1.0:
        raise ValidationError(f"NMS threshold {run['nms_thresh']} outside (0, 1)")
    if run["weights"] and not Path(run["weights"]).is_file():
        raise ValidationError(f"weight file not found: {run['weights']}")
    return cfg, run


def _out_dir(run: dict, default: str = ".") -> Path:
    path = Path(run["out_dir"] or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_model(cfg: D.DetectorConfig, run: dict) -> D.Detector:
    if run["weights"]:
        det = D.build(cfg, seed=None)
        D.load_weights(run["weights"], det)
        log.info("loaded weights from %s", run["weights"])
        return det
    if run["random_weights"]:
        return D.build(cfg, seed=run["seed"], uniform_range=RANDOM_WEIGHT_RANGE)
    raise ValidationError("no weights given: pass --weights FILE or --random-weights")


def _collect(paths: Sequence[str], suffix: str) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(p.glob(f"*{suffix}"))
        elif p.is_file():
            out.append(p)
        else:
            raise ValidationError(f"input not found: {p}")
    if not out:
        raise ValidationError(f"no {suffix} inputs found")
    return out


# ---------------------------------------------------------------------------

def cmd_profile(args) -> int:
    cfg, run = resolve(args)
    det = D.build(cfg, seed=None)
    rows = D.profile(det, args.depth)
    total = det.num_parameters()
    lines = [f"{'layer':<28} {'kind':<13} {'output shape':<30} {'params':>10} {'MACs':>14}  attention cost"]
    for r in rows:
        shape = r["output_shape"]
        shape_s = "x".join(map(str, shape)) if shape and isinstance(shape[0], int) else f"{len(shape)} maps"
        extra = f"  MSA {r['msa']} / W-MSA {r['w_msa']} = {r['ratio']:.3f}" if "msa" in r else ""
        lines.append(f"{r['name']:<28} {r['kind']:<13} {shape_s:<30} {r['params']:>10} {r['macs']:>14}{extra}")
    lines.append(f"head grids: {' / '.join(map(str, cfg.grid_sizes()))}   outputs per cell: "
                 f"{cfg.num_anchors * cfg.outputs_per_anchor}")
    lines.append(f"total parameters: {total}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if run["out_dir"]:
        out = _out_dir(run)
        (out / "profile.txt").write_text(text)
        doc = {"total_parameters": total, "grids": list(cfg.grid_sizes()), "layers": rows}
        (out / "profile.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg, run = resolve(args)
    det = _load_model(cfg, run)
    paths = _collect(args.images, ".ppm")
    out = _out_dir(run)
    records: list[tuple[str, Detection]] = []
    for path in sorted(paths, key=lambda p: p.stem):
        pixels = data.decode_ppm(path.read_bytes())
        dets = detect_image(det, data.from_bytes(pixels), run["score_thresh"], run["nms_thresh"])
        log.info("%s: %d detections", path.stem, len(dets))
        records += [(path.stem, d) for d in dets]
        if args.render:
            (out / "renders").mkdir(exist_ok=True)
            data.write_ppm(out / "renders" / f"{path.stem}.ppm", draw_detections(pixels, dets))
    target = Path(args.output) if args.output else out / "detections.tsv"
    write_detections(target, records)
    print(f"{len(records)} detections from {len(paths)} images -> {target}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, run = resolve(args)
    annos = data.read_voc_dir(args.gt_dir)
    if not annos:
        raise ValidationError(f"no annotations in {args.gt_dir}")
    dets: dict[str, list[Detection]] = {k: [] for k in annos}
    unknown = set()
    for image_id, d in read_detections(args.detections):
        if image_id not in annos:
            unknown.add(image_id)
            continue
        dets[image_id].append(d)
    if unknown:
        raise ValidationError(f"detections reference unknown image ids: {', '.join(sorted(unknown))}")
    gts = {k: a.ground_truths() for k, a in annos.items()}
    report = evaluate(dets, gts, data.CLASS_NAMES, run["score_thresh"])
    out = _out_dir(run)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.txt").write_text(report.to_text())
    for name, curve in sorted(report.curves.items()):
        (out / f"pr_{name}.csv").write_text(curve.to_csv())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _annotation_for(path: Path, ann_dir: Path | None, pixels: np.ndarray) -> data.ImageAnnotation:
    xml = (ann_dir or path.parent) / f"{path.stem}.xml"
    if xml.is_file():
        return data.read_voc(xml)
    h, w = pixels.shape[:2]
    return data.ImageAnnotation(path.stem, w, h, [])


def cmd_augment(args) -> int:
    _, run = resolve(args)
    paths = sorted(_collect(args.images, ".ppm"), key=lambda p: p.stem)
    ann_dir = Path(args.ann_dir) if args.ann_dir else None
    out = _out_dir(run)
    items = []
    for p in paths:
        pixels = data.decode_ppm(p.read_bytes())
        items.append((p.stem, pixels, _annotation_for(p, ann_dir, pixels)))
    mode, seed = args.mode, run["seed"]
    results: list[tuple[str, np.ndarray, data.ImageAnnotation]] = []
    if mode in ("none", "brightness", "grayscale"):
        for stem, pixels, anno in items:
            if mode == "brightness":
                pixels = data.brightness(pixels, args.factor)
            elif mode == "grayscale":
                pixels = data.grayscale(pixels)
            results.append((f"{stem}_{mode}", pixels, anno))
    elif mode == "mosaic":
        if len(items) < 4:
            raise ValidationError("mosaic needs at least four images")
        for k in range(len(items) // 4):
            group = items[4 * k:4 * k + 4]
            img, objs = data.mosaic([data.from_bytes(g[1]) for g in group], [g[2].objects for g in group],
                                    args.size, seed + k)
            stem = f"mosaic_{k:04d}"
            results.append((stem, data.to_bytes(img), data.ImageAnnotation(stem, args.size, args.size, objs)))
    elif mode in ("mixup", "cutmix"):
        if len(items) < 2:
            raise ValidationError(f"{mode} needs at least two images")
        for k in range(len(items) // 2):
            (sa, pa, aa), (sb, pb, ab) = items[2 * k], items[2 * k + 1]
            if mode == "mixup":
                img = data.mixup(data.from_bytes(pa), data.from_bytes(pb), args.factor)
                objs = [o for o, _ in data.mixup_boxes(aa.objects, ab.objects, args.factor)]
            else:
                img, objs = data.cutmix(data.from_bytes(pa), aa.objects, data.from_bytes(pb), ab.objects,
                                        seed=seed + k)
            stem = f"{mode}_{sa}_{sb}"
            results.append((stem, data.to_bytes(img), data.ImageAnnotation(stem, aa.width, aa.height, objs)))
    for stem, pixels, anno in results:
        data.write_ppm(out / f"{stem}.ppm", pixels)
        anno = data.ImageAnnotation(stem, anno.width, anno.height, anno.objects)
        data.write_voc(out / f"{stem}.xml", anno)
    print(f"{len(results)} augmented images ({mode}) -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    _, run = resolve(args)
    out = _out_dir(run)
    samples = data.synth_generate(args.count, run["seed"], args.width, args.height)
    for s in samples:
        data.write_ppm(out / f"{s.annotation.image_id}.ppm", s.pixels)
        data.write_voc(out / f"{s.annotation.image_id}.xml", s.annotation)
    ids = [s.annotation.image_id for s in samples]
    train, val = data.split(ids, run["seed"], args.train_fraction)
    (out / "train.txt").write_text("".join(f"{i}\n" for i in sorted(train)))
    (out / "val.txt").write_text("".join(f"{i}\n" for i in sorted(val)))
    print(f"{len(samples)} synthetic images ({len(train)} train / {len(val)} val) -> {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import format_results, run_all

    cfg, run = resolve(args)
    results = run_all(run["weights"], cfg)
    sys.stdout.write(format_results(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_INVARIANT


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value run configuration file")
    shared.add_argument("--seed", type=int, help="seed for random weights, splits and augmentation")
    shared.add_argument("--out-dir", dest="out_dir", help="directory for output files")
    shared.add_argument("--score-thresh", dest="score_thresh", type=float, help="score threshold (default 0.25)")
    shared.add_argument("--nms-thresh", dest="nms_thresh", type=float, help="NMS IoU threshold (default 0.45)")
    shared.add_argument("--random-weights", dest="random_weights", action="store_true",
                        help="use seeded random weights in [-0.1, 0.1] instead of a weight file")
    shared.add_argument("--weights", help="DW1 weight file")

    parser = argparse.ArgumentParser(prog="densesph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", parents=[shared], help="per-layer shapes, parameters and MACs")
    p.add_argument("--depth", type=int, default=2, help="module nesting depth to list")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("detect", parents=[shared], help="run detection on PPM images")
    p.add_argument("images", nargs="+", help="PPM files or directories")
    p.add_argument("--output", help="detections file (.tsv or .jsonl); default OUT_DIR/detections.tsv")
    p.add_argument("--render", action="store_true", help="also write annotated PPMs to OUT_DIR/renders")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[shared], help="evaluate detections against VOC ground truth")
    p.add_argument("gt_dir", help="directory of VOC XML annotations")
    p.add_argument("detections", help="detections file (.tsv or .jsonl)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", parents=[shared], help="write augmented images and annotations")
    p.add_argument("images", nargs="+", help="PPM files or directories (annotations: same stem .xml)")
    p.add_argument("--mode", default="none",
                   choices=("none", "brightness", "grayscale", "mosaic", "mixup", "cutmix"))
    p.add_argument("--factor", type=float, default=1.0, help="brightness factor or mixup weight")
    p.add_argument("--size", type=int, default=416, help="mosaic canvas size")
    p.add_argument("--ann-dir", dest="ann_dir", help="directory holding the XML annotations")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic annotated dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", parents=[shared], help="run the built-in invariant suites")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("DENSESPH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigFileError, D.ConfigError, WeightError, data.AnnotationError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - anything else is a broken invariant
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
