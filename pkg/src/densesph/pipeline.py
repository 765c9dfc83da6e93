"""Image-level detection and the synthetic end-to-end evaluation run."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detector as D
from .boxes import Detection
from .data import CLASS_NAMES, letterbox, split, synth_generate
from .metrics import MetricsReport, evaluate

RANDOM_WEIGHT_RANGE = 0.1


def detect_image(det: D.Detector, image: np.ndarray, score_threshold: float = 0.25,
                 nms_threshold: float = 0.45, max_det: int = 300) -> list[Detection]:
    """Detections for an ``H x W x 3`` image, in that image's pixel coordinates."""
    boxed, _, lb = letterbox(image, (), det.config.input_size)
    chw = np.ascontiguousarray(boxed.transpose(2, 0, 1))
    out = []
    for d in D.detect(det, chw, score_threshold, nms_threshold, max_det=max_det):
        box = lb.inverse_box(d.box)
        if box is not None:
            out.append(Detection(box, d.class_id, d.score))
    return out


@dataclass
class PipelineResult:
    train_ids: list[str]
    val_ids: list[str]
    detections: dict[str, list[Detection]]
    report: MetricsReport


def synthetic_run(n_images: int = 200, seed: int = 0, train_fraction: float = 0.8,
                  cfg: D.DetectorConfig | None = None, score_threshold: float = 0.25,
                  nms_threshold: float = 0.45) -> PipelineResult:
    """Generate, split, detect on the validation split with random weights, evaluate.

    Weights are drawn uniformly in +/-0.1 from ``seed``; the whole run is a
    pure function of its arguments.
    """
    samples = {s.annotation.image_id: s for s in synth_generate(n_images, seed)}
    train_ids, val_ids = split(samples, seed, train_fraction)
    det = D.build(cfg or D.DetectorConfig(), seed=seed, uniform_range=RANDOM_WEIGHT_RANGE)
    dets = {i: detect_image(det, samples[i].image, score_threshold, nms_threshold) for i in sorted(val_ids)}
    gts = {i: samples[i].annotation.ground_truths() for i in sorted(val_ids)}
    report = evaluate(dets, gts, CLASS_NAMES, score_threshold)
    return PipelineResult(train_ids, val_ids, dets, report)
