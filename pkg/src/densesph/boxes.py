"""Bounding-box algebra: IoU family, CIoU loss and its gradient, greedy NMS.

Boxes are center-form ``(cx, cy, w, h)``. All scalar math here is float64.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_ASPECT_SCALE = 4.0 / math.pi ** 2


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class id must be non-negative, got {self.class_id}")


def _overlap(a: Box, b: Box) -> tuple[float, float, float]:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # areas from the same corners as the intersection, so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter, union, inter / union


def _enclosing(a: Box, b: Box) -> tuple[float, float]:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    return max(ax2, bx2) - min(ax1, bx1), max(ay2, by2) - min(ay1, by1)


def iou(a: Box, b: Box) -> float:
    return _overlap(a, b)[2]


def giou(a: Box, b: Box) -> float:
    _, union, value = _overlap(a, b)
    cw, ch = _enclosing(a, b)
    hull = cw * ch
    return value - (hull - union) / hull


def diou(a: Box, b: Box) -> float:
    cw, ch = _enclosing(a, b)
    rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    return iou(a, b) - rho2 / (cw * cw + ch * ch)


def aspect_consistency(pred: Box, gt: Box) -> float:
    """Squared arctangent gap between aspect ratios, scaled by 4/pi^2."""
    d = math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)
    return _ASPECT_SCALE * d * d


def ciou_loss(pred: Box, gt: Box) -> float:
    """Complete-IoU loss ``1 - IoU + rho^2/eta^2 + beta * xi``.

    ``rho`` is the distance between centers, ``eta`` the diagonal of the
    smallest enclosing box, ``xi`` the aspect consistency term and
    ``beta = xi / ((1 - IoU) + xi)``.
    """
    value = iou(pred, gt)
    cw, ch = _enclosing(pred, gt)
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    xi = aspect_consistency(pred, gt)
    denom = (1.0 - value) + xi
    penalty = xi * xi / denom if denom > 0 else 0.0
    return 1.0 - value + rho2 / (cw * cw + ch * ch) + penalty


def _edge_sides(pred: Box, gt: Box) -> tuple[int, int, int, int]:
    """Side of each predicted edge (x1, x2, y1, y2) relative to the matching gt edge.

    +1 means the predicted coordinate is larger. Ties count as the predicted
    edge lying inside the ground truth (+1 for x1/y1, -1 for x2/y2).
    """
    x1, y1, x2, y2 = pred.corners
    gx1, gy1, gx2, gy2 = gt.corners
    return (1 if x1 >= gx1 else -1, 1 if x2 > gx2 else -1, 1 if y1 >= gy1 else -1, 1 if y2 > gy2 else -1)


def _ciou_gradient_sides(pred: Box, gt: Box, sides: Sequence[int], beta_constant: bool) -> np.ndarray:
    x1, y1, x2, y2 = pred.corners
    gx1, gy1, gx2, gy2 = gt.corners
    w, h = pred.w, pred.h
    # an edge is "inner" when it bounds the intersection rather than the enclosing box
    inner = (sides[0] > 0, sides[1] < 0, sides[2] > 0, sides[3] < 0)

    # partials are accumulated on corner coordinates (x1, x2, y1, y2)
    iw = min(x2, gx2) - max(x1, gx1)
    ih = min(y2, gy2) - max(y1, gy1)
    d_inter = np.zeros(4)
    if iw > 0 and ih > 0:
        inter = iw * ih
        d_inter[:] = [-ih * inner[0], ih * inner[1], -iw * inner[2], iw * inner[3]]
    else:
        inter = 0.0
    d_area = np.array([-(y2 - y1), y2 - y1, -(x2 - x1), x2 - x1])
    union = (x2 - x1) * (y2 - y1) + (gx2 - gx1) * (gy2 - gy1) - inter
    value = inter / union
    d_iou = (d_inter * (union + inter) - inter * d_area) / union ** 2

    cw = max(x2, gx2) - min(x1, gx1)
    ch = max(y2, gy2) - min(y1, gy1)
    eta2 = cw * cw + ch * ch
    d_eta2 = np.array([-2.0 * cw * (not inner[0]), 2.0 * cw * (not inner[1]),
                       -2.0 * ch * (not inner[2]), 2.0 * ch * (not inner[3])])
    dx, dy = pred.cx - gt.cx, pred.cy - gt.cy
    rho2 = dx * dx + dy * dy
    # d(rho^2)/d corners: cx = (x1 + x2) / 2
    d_rho2 = np.array([dx, dx, dy, dy])
    d_dist = d_rho2 / eta2 - rho2 * d_eta2 / eta2 ** 2

    corner_grad = -d_iou + d_dist
    # back to (cx, cy, w, h): x1 = cx - w/2, x2 = cx + w/2
    to_center = np.array([
        [1.0, 0.0, -0.5, 0.0],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [0.0, 1.0, 0.0, 0.5],
    ])
    grad = corner_grad @ to_center
    d_iou_c = d_iou @ to_center

    gap = math.atan(gt.w / gt.h) - math.atan(w / h)
    xi = _ASPECT_SCALE * gap * gap
    r2 = w * w + h * h
    d_xi = np.array([0.0, 0.0, -2.0 * _ASPECT_SCALE * gap * h / r2,
                     2.0 * _ASPECT_SCALE * gap * w / r2])
    denom = (1.0 - value) + xi
    if denom > 0 and xi > 0:
        if beta_constant:
            grad += (xi / denom) * d_xi
        else:
            grad += (2.0 * xi * d_xi * denom - xi * xi * (d_xi - d_iou_c)) / denom ** 2
    return grad


def ciou_gradient(pred: Box, gt: Box, beta_constant: bool = False) -> np.ndarray:
    """Analytic d(ciou_loss)/d(cx, cy, w, h) of ``pred``.

    Where a predicted edge coincides with a ground-truth edge the loss has a
    kink; the one-sided derivative with the predicted edge moved inside the
    ground truth is returned. Exactly identical boxes return the zero
    vector, a valid subgradient at the minimum.

    With ``beta_constant=True`` the trade-off weight is held fixed, which
    gives the update direction used in the original CIoU training recipe
    rather than the true derivative.
    """
    if pred == gt:
        return np.zeros(4)
    return _ciou_gradient_sides(pred, gt, _edge_sides(pred, gt), beta_constant)


def ciou_subgradients(pred: Box, gt: Box, tol: float = 0.0) -> list[np.ndarray]:
    """One-sided gradients around every edge within ``tol`` of its ground-truth edge.

    Each predicted edge closer than ``tol`` to the matching ground-truth
    edge is evaluated on both sides, so up to 16 gradients come back. Their
    convex hull approximates the subdifferential near a kink; with
    ``tol = 0`` only the plain gradient is returned.
    """
    if pred == gt:
        return [np.zeros(4)]
    base = _edge_sides(pred, gt)
    p, g = pred.corners, gt.corners
    gaps = (p[0] - g[0], p[2] - g[2], p[1] - g[1], p[3] - g[3])
    options = [(-1, 1) if abs(gap) <= tol else (side,) for gap, side in zip(gaps, base)]
    out = []
    for s0 in options[0]:
        for s1 in options[1]:
            for s2 in options[2]:
                for s3 in options[3]:
                    out.append(_ciou_gradient_sides(pred, gt, (s0, s1, s2, s3), False))
    return out


def confidence(pr_obj: int, iou_value: float) -> float:
    """Objectness-gated confidence: ``pr_obj * IoU`` with ``pr_obj`` in {0, 1}."""
    if pr_obj not in (0, 1):
        raise ValueError(f"pr_obj must be 0 or 1, got {pr_obj!r}")
    if not 0.0 <= iou_value <= 1.0:
        raise ValueError(f"iou must lie in [0, 1], got {iou_value}")
    return float(pr_obj) * float(iou_value)


def corners_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.corners for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two corner-form arrays of shape (n, 4) and (m, 4)."""
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms_order(dets: Sequence[Detection]) -> list[int]:
    """Processing order: score descending, then class id, then insertion order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id, i))


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    A detection is kept iff its IoU with every already kept detection of the
    same class is at most ``iou_threshold``. Output follows keep order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if not dets:
        return []
    order = np.array(nms_order(dets))
    corners = corners_array([dets[i].box for i in order])
    classes = np.array([dets[i].class_id for i in order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        rest = np.nonzero(alive[pos + 1:] & (classes[pos + 1:] == classes[pos]))[0] + pos + 1
        if rest.size:
            overlaps = iou_matrix(corners[pos:pos + 1], corners[rest])[0]
            alive[rest[overlaps > iou_threshold]] = False
    return [dets[i] for i in keep]


# ---------------------------------------------------------------------------
# Detections interchange: JSONL (one object per line) or TSV with a header.

DETECTION_FIELDS = ("image_id", "class_id", "score", "cx", "cy", "w", "h")


def _record(image_id: str, det: Detection) -> dict:
    b = det.box
    return {"image_id": image_id, "class_id": det.class_id, "score": det.score,
            "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}


def format_detections(records: Iterable[tuple[str, Detection]], fmt: str = "tsv") -> str:
    buf = io.StringIO()
    if fmt == "jsonl":
        for image_id, det in records:
            buf.write(json.dumps(_record(image_id, det)) + "\n")
    elif fmt == "tsv":
        buf.write("\t".join(DETECTION_FIELDS) + "\n")
        for image_id, det in records:
            rec = _record(image_id, det)
            buf.write("\t".join(repr(float(rec[k])) if k not in ("image_id", "class_id")
                                else str(rec[k]) for k in DETECTION_FIELDS) + "\n")
    else:
        raise ValueError(f"unknown detections format {fmt!r}")
    return buf.getvalue()


def parse_detections(text: str, fmt: str = "tsv") -> list[tuple[str, Detection]]:
    out = []
    if fmt == "jsonl":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    elif fmt == "tsv":
        reader = csv.DictReader(io.StringIO(text), delimiter="\t")
        if reader.fieldnames is None or tuple(reader.fieldnames) != DETECTION_FIELDS:
            raise ValueError("detections TSV header must list " + ", ".join(DETECTION_FIELDS))
        rows = list(reader)
    else:
        raise ValueError(f"unknown detections format {fmt!r}")
    for n, row in enumerate(rows, start=1):
        try:
            box = Box(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"]))
            det = Detection(box, int(row["class_id"]), float(row["score"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"detections record {n}: {exc}") from exc
        out.append((str(row["image_id"]), det))
    return out


def detections_format_for(path) -> str:
    return "jsonl" if Path(path).suffix.lower() in (".jsonl", ".json") else "tsv"


def write_detections(path, records: Iterable[tuple[str, Detection]]) -> None:
    Path(path).write_text(format_detections(records, detections_format_for(path)))


def read_detections(path) -> list[tuple[str, Detection]]:
    return parse_detections(Path(path).read_text(), detections_format_for(path))
