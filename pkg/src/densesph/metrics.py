"""Detection evaluation: matching, P/R/F1, all-point AP, mAP, threshold sweeps.

Ground truth and detections are passed per image as mappings
``image_id -> list``; aggregation always walks image ids in sorted order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import Box, Detection, iou

COCO_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
SIZE_BUCKETS = {"S": (0.0, 32.0 ** 2), "M": (32.0 ** 2, 96.0 ** 2), "L": (96.0 ** 2, float("inf"))}


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int


@dataclass
class MatchResult:
    det_tp: list[bool]
    gt_matched: list[bool]
    det_gt: list[int | None]
    iou_threshold: float

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    n_gt: int

    @property
    def defined(self) -> bool:
        return self.n_gt > 0

    def to_csv(self) -> str:
        lines = ["recall,precision"]
        lines += [f"{r!r},{p!r}" for r, p in zip(self.recall.tolist(), self.precision.tolist())]
        return "\n".join(lines) + "\n"


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching of one image's detections to its ground truth.

    Within each class, detections in descending score order (input order on
    ties) claim the unmatched ground truth with the highest IoU at or above
    the threshold; equal IoUs go to the lower ground-truth index.
    """
    det_tp = [False] * len(dets)
    det_gt: list[int | None] = [None] * len(dets)
    gt_matched = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if gt_matched[j] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            gt_matched[best] = True
            det_tp[i] = True
            det_gt[i] = best
    return MatchResult(det_tp, gt_matched, det_gt, iou_threshold)


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp > 0 else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn > 0 else 0.0


def f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def ranked_curve(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> tuple[PRCurve, float]:
    """PR curve and all-point AP from scored TP/FP labels.

    Equal scores form one group; the curve gets one point per group. AP is
    the recall-weighted sum of the precision envelope (running maximum from
    the right).
    """
    if n_gt <= 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0), 0.0
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(is_tp, dtype=np.int64)
    if scores.size == 0:
        return PRCurve(np.zeros(0), np.zeros(0), n_gt), 0.0
    order = np.argsort(-scores, kind="stable")
    s, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    # last index of each tie group
    ends = np.append(np.nonzero(np.diff(s))[0], s.size - 1)
    rec = ctp[ends] / n_gt
    prec = ctp[ends] / (ctp[ends] + cfp[ends])
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    # recall steps as integer TP increments, divided once: a perfect ranking gives exactly 1
    steps = np.diff(np.concatenate(([0], ctp[ends])))
    return PRCurve(rec, prec, n_gt), float(np.sum(steps * envelope) / n_gt)


def _filter_class(items: Mapping[str, Sequence], class_id: int | None):
    if class_id is None:
        return {k: list(v) for k, v in items.items()}
    return {k: [x for x in v if x.class_id == class_id] for k, v in items.items()}


def _ranked_labels(dets: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[GroundTruth]],
                   iou_threshold: float) -> tuple[list[float], list[bool], int]:
    scores: list[float] = []
    labels: list[bool] = []
    n_gt = 0
    for image_id in sorted(set(dets) | set(gts)):
        d = list(dets.get(image_id, ()))
        g = list(gts.get(image_id, ()))
        n_gt += len(g)
        if d:
            m = match(d, g, iou_threshold)
            scores += [x.score for x in d]
            labels += m.det_tp
    return scores, labels, n_gt


def average_precision(dets: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[GroundTruth]],
                      iou_threshold: float = 0.5, class_id: int | None = None) -> tuple[PRCurve, float]:
    """AP of one class over a set of images.

    With ``class_id`` set, both sides are filtered to that class first. If no
    ground truth exists the AP is 0 and ``curve.defined`` is False.
    """
    d = _filter_class(dets, class_id)
    g = _filter_class(gts, class_id)
    return ranked_curve(*_ranked_labels(d, g, iou_threshold))


def ap_sweep(dets, gts, class_id: int | None = None) -> dict[str, float]:
    aps = {t: average_precision(dets, gts, t, class_id)[1] for t in COCO_THRESHOLDS}
    return {"AP50": aps[0.5], "AP75": aps[0.75], "AP50:95": float(np.mean(list(aps.values())))}


def size_bucket(box: Box) -> str:
    a = box.area
    for name, (lo, hi) in SIZE_BUCKETS.items():
        if lo <= a < hi:
            return name
    raise ValueError(f"area {a} outside all size buckets")


def size_stratified_ap(dets, gts, class_id: int | None = None,
                       thresholds: Sequence[float] = COCO_THRESHOLDS) -> dict[str, float | None]:
    """AP averaged over ``thresholds`` within each COCO area bucket.

    Ground truths and detections are both bucketed by their own area;
    detections outside the bucket are dropped instead of counted as false
    positives. Buckets without ground truth map to ``None``.
    """
    d_all = _filter_class(dets, class_id)
    g_all = _filter_class(gts, class_id)
    out: dict[str, float | None] = {}
    for name in SIZE_BUCKETS:
        g = {k: [x for x in v if size_bucket(x.box) == name] for k, v in g_all.items()}
        if not any(g.values()):
            out[f"AP_{name}"] = None
            continue
        d = {k: [x for x in v if size_bucket(x.box) == name] for k, v in d_all.items()}
        out[f"AP_{name}"] = float(np.mean([average_precision(d, g, t)[1] for t in thresholds]))
    return out


def mean_ap(per_class_ap: Sequence[float]) -> float:
    if len(per_class_ap) == 0:
        raise ValueError("mean_ap needs at least one class AP")
    return float(np.mean(per_class_ap))


# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    class_id: int
    name: str
    n_gt: int
    tp: int
    fp: int
    fn: int
    P: float
    R: float
    F1: float
    AP: float
    AP50: float
    AP75: float
    AP50_95: float
    AP_S: float | None
    AP_M: float | None
    AP_L: float | None


@dataclass
class MetricsReport:
    classes: list[ClassMetrics]
    mAP: float
    mAP50_95: float
    P: float
    R: float
    F1: float
    tp: int
    fp: int
    fn: int
    score_threshold: float
    curves: dict[str, PRCurve] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "score_threshold": self.score_threshold,
            "aggregate": {"P": self.P, "R": self.R, "F1": self.F1, "mAP": self.mAP,
                          "mAP50_95": self.mAP50_95, "TP": self.tp, "FP": self.fp, "FN": self.fn},
            "classes": [vars(c) for c in self.classes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        def pct(v):
            return "    -" if v is None else f"{100.0 * v:5.1f}"

        head = (f"{'Class':<6} {'GT':>5} {'TP':>5} {'FP':>5} {'FN':>5}  P (%)  R (%) F1 (%) "
                f"AP50 (%) AP75 (%) AP50:95 (%) AP_S AP_M AP_L")
        lines = [f"score threshold {self.score_threshold}, IoU 0.5 for P/R/F1/AP", head, "-" * len(head)]
        for c in self.classes:
            lines.append(f"{c.name:<6} {c.n_gt:>5} {c.tp:>5} {c.fp:>5} {c.fn:>5}  {pct(c.P)}  {pct(c.R)}  "
                         f"{pct(c.F1)}    {pct(c.AP50)}    {pct(c.AP75)}       {pct(c.AP50_95)} "
                         f"{pct(c.AP_S)} {pct(c.AP_M)} {pct(c.AP_L)}")
        lines.append("-" * len(head))
        lines.append(f"{'all':<6} {sum(c.n_gt for c in self.classes):>5} {self.tp:>5} {self.fp:>5} "
                     f"{self.fn:>5}  {pct(self.P)}  {pct(self.R)}  {pct(self.F1)}")
        lines.append(f"mAP (%) {pct(self.mAP)}   mAP50:95 (%) {pct(self.mAP50_95)}")
        return "\n".join(lines) + "\n"


def evaluate(dets: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[GroundTruth]],
             class_names: Sequence[str] | None = None, score_threshold: float = 0.25) -> MetricsReport:
    """Full report over the classes that have ground truth.

    P/R/F1 and TP/FP/FN use the detections at or above ``score_threshold``
    at IoU 0.5; AP values use every detection. Per-class AP is AP50 and
    ``mAP`` is its mean over classes. Aggregate FP also counts detections
    of classes without ground truth.
    """
    if not any(gts.values()):
        raise ValueError("no ground truth boxes to evaluate against")
    present = sorted({g.class_id for v in gts.values() for g in v})
    operating = {k: [d for d in v if d.score >= score_threshold] for k, v in dets.items()}
    rows: list[ClassMetrics] = []
    curves: dict[str, PRCurve] = {}
    for c in present:
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        g = _filter_class(gts, c)
        d_op = _filter_class(operating, c)
        tp = fp = 0
        for image_id in sorted(set(g) | set(d_op)):
            m = match(d_op.get(image_id, []), g.get(image_id, []), 0.5)
            tp += m.tp
            fp += m.fp
        n_gt = sum(len(v) for v in g.values())
        fn = n_gt - tp
        p, r = precision(tp, fp), recall(tp, fn)
        curve, ap50 = average_precision(dets, gts, 0.5, c)
        curves[name] = curve
        sweep = ap_sweep(dets, gts, c)
        sizes = size_stratified_ap(dets, gts, c)
        rows.append(ClassMetrics(c, name, n_gt, tp, fp, fn, p, r, f1(p, r), ap50, ap50, sweep["AP75"],
                                 sweep["AP50:95"], sizes["AP_S"], sizes["AP_M"], sizes["AP_L"]))
    tp = sum(r.tp for r in rows)
    # detections of classes absent from the ground truth are false positives too
    stray = sum(1 for v in operating.values() for d in v if d.class_id not in present)
    fp = sum(r.fp for r in rows) + stray
    fn = sum(r.fn for r in rows)
    p, r = precision(tp, fp), recall(tp, fn)
    return MetricsReport(rows, mean_ap([c.AP for c in rows]), mean_ap([c.AP50_95 for c in rows]),
                         p, r, f1(p, r), tp, fp, fn, score_threshold, curves)
