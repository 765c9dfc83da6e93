"""Dense-CSP backbone, CBAM PANet neck, transformer prediction heads, decode and loss."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

from . import tensor as T
from .attention import CBAM, STRBlockPair, complexity
from .blocks import (Conv2d, ConvBNAct, CSPBlock, DenseBlock, Module, SPPBlock, WeightError,
                     trace)
from .boxes import Box, Detection, ciou_gradient, ciou_loss, ciou_subgradients, nms
from .metrics import GroundTruth

# (w, h) in input pixels, three per stride 4 / 8 / 16 / 32
DEFAULT_ANCHORS = (
    ((5.0, 6.0), (8.0, 14.0), (15.0, 11.0)),
    ((10.0, 13.0), (16.0, 30.0), (33.0, 23.0)),
    ((30.0, 61.0), (62.0, 45.0), (59.0, 119.0)),
    ((116.0, 90.0), (156.0, 198.0), (373.0, 326.0)),
)
TW_CLAMP = 4.0
_EDGE_EPS = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 416
    num_classes: int = 8
    strides: tuple[int, ...] = (4, 8, 16, 32)
    anchors: tuple = DEFAULT_ANCHORS
    stem_channels: int = 16
    widths: tuple[int, ...] = (32, 64, 128, 256)
    dense_layers: int = 4
    growth: int = 16
    csp_depths: tuple[int, ...] = (3, 6, 6, 3)
    neck_depth: int = 1
    spp_kernels: tuple[int, ...] = (5, 9, 13)
    cbam_reduction: int = 16
    window: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    activation: str = "silu"
    adh: bool = True
    attention_scale: bool = True
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.strides) != 4 or len(self.widths) != 4 or len(self.csp_depths) != 4:
            raise ConfigError("strides, widths and csp_depths need one entry per backbone stage (4)")
        if len(self.anchors) != 4:
            raise ConfigError("anchors need one list per stride (4)")
        for stride in self.strides:
            if self.input_size % stride:
                raise ConfigError(f"input size {self.input_size} not divisible by stride {stride}")
        if len({len(a) for a in self.anchors}) != 1:
            raise ConfigError("every scale needs the same number of anchors")
        for scale in self.anchors:
            for aw, ah in scale:
                if aw <= 0 or ah <= 0:
                    raise ConfigError(f"anchor ({aw}, {ah}) must be positive")
        if self.activation not in ("silu", "mish", "leaky_relu"):
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def scale_ids(self) -> tuple[int, ...]:
        """Backbone stages that carry a prediction head."""
        return (0, 1, 2, 3) if self.adh else (1, 2, 3)

    @property
    def head_strides(self) -> tuple[int, ...]:
        return tuple(self.strides[i] for i in self.scale_ids)

    @property
    def head_anchors(self) -> tuple:
        return tuple(self.anchors[i] for i in self.scale_ids)

    @property
    def num_anchors(self) -> int:
        return len(self.anchors[0])

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.num_classes

    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(self.input_size // s for s in self.head_strides)


class Backbone(Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        act = cfg.activation
        w = cfg.widths
        self.stem = self.add("stem", ConvBNAct(3, cfg.stem_channels, 3, 2, act))
        c_prev = cfg.stem_channels
        self.stages = []
        for i in range(4):
            down = self.add(f"down{i}", ConvBNAct(c_prev, w[i], 3, 2, act))
            dense = self.add(f"dense{i}", DenseBlock(w[i], cfg.dense_layers, cfg.growth, act))
            csp = self.add(f"csp{i}", CSPBlock(dense.c_out, w[i], cfg.csp_depths[i], act))
            self.stages.append((down, dense, csp))
            c_prev = w[i]
        self.spp = self.add("spp", SPPBlock(w[3], cfg.spp_kernels, act))

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for down, dense, csp in self.stages:
            x = csp(dense(down(x)))
            feats.append(x)
        feats[-1] = self.spp(feats[-1])
        return feats


class Neck(Module):
    """Top-down then bottom-up fusion over the head scales, CBAM after each fusion."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        act = cfg.activation
        ch = [cfg.widths[i] for i in cfg.scale_ids]
        n = len(ch)
        self.n = n
        self.lateral, self.td_csp, self.td_cbam = {}, {}, {}
        for i in range(n - 1, 0, -1):
            self.lateral[i] = self.add(f"lateral{i}", ConvBNAct(ch[i], ch[i - 1], 1, 1, act))
            self.td_csp[i] = self.add(f"td_csp{i}", CSPBlock(2 * ch[i - 1], ch[i - 1], cfg.neck_depth, act))
            self.td_cbam[i] = self.add(f"td_cbam{i}", CBAM(ch[i - 1], cfg.cbam_reduction))
        self.down, self.bu_csp, self.bu_cbam = {}, {}, {}
        for i in range(1, n):
            self.down[i] = self.add(f"down{i}", ConvBNAct(ch[i - 1], ch[i - 1], 3, 2, act))
            self.bu_csp[i] = self.add(f"bu_csp{i}", CSPBlock(2 * ch[i - 1], ch[i], cfg.neck_depth, act))
            self.bu_cbam[i] = self.add(f"bu_cbam{i}", CBAM(ch[i], cfg.cbam_reduction))

    def forward(self, feats):
        n = self.n
        lat = {}
        x = feats[-1]
        for i in range(n - 1, 0, -1):
            lat[i] = self.lateral[i](x)
            fused = T.concat([T.upsample_nearest2x(lat[i]), feats[i - 1]], axis=0)
            x = self.td_cbam[i](self.td_csp[i](fused))
        outs = [x]
        for i in range(1, n):
            fused = T.concat([self.down[i](outs[-1]), lat[i]], axis=0)
            outs.append(self.bu_cbam[i](self.bu_csp[i](fused)))
        return outs


class Head(Module):
    def __init__(self, c: int, cfg: DetectorConfig):
        super().__init__()
        self.str_pair = self.add("str", STRBlockPair(c, cfg.window, cfg.heads, cfg.mlp_ratio, cfg.attention_scale))
        self.pred = self.add("pred", Conv2d(c, cfg.num_anchors * cfg.outputs_per_anchor, 1))

    def forward(self, x):
        return self.pred(self.str_pair(x))


class Detector(Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.config = cfg
        self.backbone = self.add("backbone", Backbone(cfg))
        self.neck = self.add("neck", Neck(cfg))
        ch = [cfg.widths[i] for i in cfg.scale_ids]
        self.heads = [self.add(f"head{k}", Head(c, cfg)) for k, c in enumerate(ch)]
        self.assign_paths()

    def forward(self, image):
        cfg = self.config
        expected = (3, cfg.input_size, cfg.input_size)
        if tuple(image.shape) != expected:
            raise T.ShapeError(f"image shape {tuple(image.shape)} does not match configured {expected}")
        feats = self.backbone(np.asarray(image, dtype=T.DTYPE))
        feats = [feats[i] for i in cfg.scale_ids]
        return [head(f) for head, f in zip(self.heads, self.neck(feats))]


def build(cfg: DetectorConfig | None = None, seed: int | None = 0,
          uniform_range: float | None = None) -> Detector:
    """Construct the detector graph; random-initialize when ``seed`` is not None."""
    det = Detector(cfg or DetectorConfig())
    if seed is not None:
        det.init_weights(seed, uniform_range)
    return det


def forward(detector: Detector, image: np.ndarray) -> list[np.ndarray]:
    return detector(image)


def profile(detector: Detector, max_depth: int = 2) -> list[dict]:
    """Per-layer rows (name, output shape, params, MACs) from a traced forward on zeros.

    Transformer rows also carry the global-MSA and window-MSA operation counts.
    """
    cfg = detector.config
    with trace() as records:
        detector(np.zeros((3, cfg.input_size, cfg.input_size), dtype=T.DTYPE))
    own = {rec.path: rec.macs for rec in records}
    rows = []
    for rec in sorted(records, key=lambda r: r.path):
        depth = rec.path.count(".") + 1 if rec.path else 0
        if depth > max_depth and rec.kind != "STRBlockPair":
            continue
        prefix = rec.path + "."
        macs = sum(v for p, v in own.items() if p == rec.path or not rec.path or p.startswith(prefix))
        shape = rec.out_shape
        row = {"name": rec.path or "detector", "kind": rec.kind,
               "output_shape": [list(s) for s in shape] if shape and isinstance(shape[0], tuple) else list(shape),
               "params": rec.params, "macs": macs}
        if rec.kind == "STRBlockPair":
            c, h, w = rec.in_shape
            cx = complexity(h, w, c, cfg.window)
            row.update(msa=cx["msa"], w_msa=cx["w_msa"], ratio=cx["msa"] / cx["w_msa"])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Decode / encode

def _sig(x):
    return T.sigmoid(np.asarray(x, dtype=np.float64))


def decode_arrays(outputs: Sequence[np.ndarray], cfg: DetectorConfig):
    """Vectorized decode of every (scale, anchor, cell): boxes (N, 4), scores, classes."""
    boxes, scores, classes = [], [], []
    k = cfg.outputs_per_anchor
    for out, stride, anchors in zip(outputs, cfg.head_strides, cfg.head_anchors):
        a_n = len(anchors)
        s = out.shape[-1]
        if out.shape != (a_n * k, s, s):
            raise T.ShapeError(f"head output shape {out.shape} does not match {a_n} anchors x {k} outputs")
        o = out.astype(np.float64).reshape(a_n, k, s, s)
        gy, gx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        aw = np.array([a[0] for a in anchors])[:, None, None]
        ah = np.array([a[1] for a in anchors])[:, None, None]
        cx = (gx + _sig(o[:, 0])) * stride
        cy = (gy + _sig(o[:, 1])) * stride
        w = aw * np.exp(np.clip(o[:, 2], -TW_CLAMP, TW_CLAMP))
        h = ah * np.exp(np.clip(o[:, 3], -TW_CLAMP, TW_CLAMP))
        cls_p = _sig(o[:, 5:])
        best = cls_p.argmax(axis=1)
        score = _sig(o[:, 4]) * np.take_along_axis(cls_p, best[:, None], axis=1)[:, 0]
        boxes.append(np.stack([cx, cy, w, h], axis=-1).reshape(-1, 4))
        scores.append(score.reshape(-1))
        classes.append(best.reshape(-1))
    return np.concatenate(boxes), np.concatenate(scores), np.concatenate(classes)


def decode(outputs: Sequence[np.ndarray], cfg: DetectorConfig, score_threshold: float = 0.25,
           max_candidates: int | None = None) -> list[Detection]:
    """Turn raw head logits into detections.

    Per cell and anchor: ``cx = (gx + sigmoid(tx)) * stride``, same for y,
    ``w = anchor_w * exp(tw)`` with ``tw`` clamped to +/-4, score
    ``sigmoid(obj) * max sigmoid(cls)``, class = argmax (lowest index on ties).
    Detections scoring below ``score_threshold`` are dropped; ``max_candidates``
    keeps only the top-scoring ones (stable order).
    """
    boxes, scores, classes = decode_arrays(outputs, cfg)
    keep = np.nonzero(scores >= score_threshold)[0]
    if max_candidates is not None and keep.size > max_candidates:
        keep = keep[np.argsort(-scores[keep], kind="stable")[:max_candidates]]
    return [Detection(Box(*boxes[i]), int(classes[i]), float(scores[i])) for i in keep]


def encode(box: Box, scale: int, anchor: int, cfg: DetectorConfig) -> tuple[int, int, np.ndarray]:
    """Inverse of decode for the box coordinates: ``(gx, gy, [tx, ty, tw, th])``."""
    stride = cfg.head_strides[scale]
    aw, ah = cfg.head_anchors[scale][anchor]
    s = cfg.input_size // stride
    gx = min(int(box.cx // stride), s - 1)
    gy = min(int(box.cy // stride), s - 1)
    # a center exactly on a cell boundary needs an infinite logit; stay just inside the cell
    fx = min(max(box.cx / stride - gx, _EDGE_EPS), 1 - _EDGE_EPS)
    fy = min(max(box.cy / stride - gy, _EDGE_EPS), 1 - _EDGE_EPS)
    t = np.array([math.log(fx / (1 - fx)), math.log(fy / (1 - fy)),
                  math.log(box.w / aw), math.log(box.h / ah)])
    return gx, gy, t


def decode_cell(t: Sequence[float], gx: int, gy: int, scale: int, anchor: int, cfg: DetectorConfig) -> Box:
    stride = cfg.head_strides[scale]
    aw, ah = cfg.head_anchors[scale][anchor]
    return Box((gx + float(_sig(t[0]))) * stride, (gy + float(_sig(t[1]))) * stride,
               aw * math.exp(min(max(t[2], -TW_CLAMP), TW_CLAMP)),
               ah * math.exp(min(max(t[3], -TW_CLAMP), TW_CLAMP)))


# ---------------------------------------------------------------------------
# Targets and loss

@dataclass(frozen=True)
class Assignment:
    gt_index: int
    scale: int
    anchor: int
    gx: int
    gy: int
    box: Box
    class_id: int

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.scale, self.anchor, self.gy, self.gx)


def anchor_iou(w: float, h: float, aw: float, ah: float) -> float:
    """IoU of two boxes sharing a center."""
    inter = min(w, aw) * min(h, ah)
    return inter / (w * h + aw * ah - inter)


def assign_targets(gts: Sequence[GroundTruth], cfg: DetectorConfig) -> list[Assignment]:
    """Pick the responsible (scale, anchor, cell) for each ground truth.

    The anchor with the highest centered IoU over all scales wins (earlier
    scale, then earlier anchor, on ties); the cell containing the center at
    that scale is responsible.
    """
    out = []
    size = cfg.input_size
    for i, g in enumerate(gts):
        b = g.box
        if b.w <= 1 or b.h <= 1:
            raise ValueError(f"ground truth {i} is degenerate ({b.w:.3g} x {b.h:.3g} px)")
        x1, y1, x2, y2 = b.corners
        if x1 < 0 or y1 < 0 or x2 > size or y2 > size:
            raise ValueError(f"ground truth {i} lies outside the {size}x{size} input")
        best, best_iou = None, -1.0
        for s, anchors in enumerate(cfg.head_anchors):
            for a, (aw, ah) in enumerate(anchors):
                v = anchor_iou(b.w, b.h, aw, ah)
                if v > best_iou:
                    best, best_iou = (s, a), v
        s, a = best
        stride = cfg.head_strides[s]
        n = size // stride
        gx = min(int(b.cx // stride), n - 1)
        gy = min(int(b.cy // stride), n - 1)
        out.append(Assignment(i, s, a, gx, gy, b, g.class_id))
    return out


def _bce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    return np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))


def _cell(outputs, cfg, a: Assignment) -> np.ndarray:
    k = cfg.outputs_per_anchor
    return outputs[a.scale][a.anchor * k:(a.anchor + 1) * k, a.gy, a.gx].astype(np.float64)


def total_loss(outputs: Sequence[np.ndarray], assignments: Sequence[Assignment],
               cfg: DetectorConfig) -> dict[str, float]:
    """Coordinate (CIoU), class (BCE) and objectness (BCE) terms and their weighted sum.

    Coordinate and class terms average over assignments; objectness averages
    over every anchor of every cell of every head.
    """
    k = cfg.outputs_per_anchor
    if assignments:
        coord = float(np.mean([ciou_loss(decode_cell(_cell(outputs, cfg, a)[:4], a.gx, a.gy, a.scale,
                                                      a.anchor, cfg), a.box) for a in assignments]))
        cls_terms = []
        for a in assignments:
            onehot = np.zeros(cfg.num_classes)
            onehot[a.class_id] = 1.0
            cls_terms.append(_bce(_cell(outputs, cfg, a)[5:], onehot))
        cls = float(np.mean(cls_terms))
    else:
        coord = cls = 0.0
    positive = {a.key for a in assignments}
    obj_sum, obj_n = 0.0, 0
    for s, out in enumerate(outputs):
        n = out.shape[-1]
        obj = out.astype(np.float64).reshape(cfg.num_anchors, k, n, n)[:, 4]
        target = np.zeros_like(obj)
        for (ps, pa, py, px) in positive:
            if ps == s:
                target[pa, py, px] = 1.0
        obj_sum += float(_bce(obj, target).sum())
        obj_n += obj.size
    obj_term = obj_sum / obj_n
    wc, wl, wo = cfg.loss_weights
    return {"total": wc * coord + wl * cls + wo * obj_term, "coord": coord, "cls": cls, "obj": obj_term}


def _box_chain(t: np.ndarray, pred: Box, stride: int) -> np.ndarray:
    """d(cx, cy, w, h)/d(tx, ty, tw, th) (diagonal); zero where tw/th are clamped."""
    sx, sy = float(_sig(t[0])), float(_sig(t[1]))
    return np.array([
        stride * sx * (1 - sx),
        stride * sy * (1 - sy),
        pred.w if abs(t[2]) < TW_CLAMP else 0.0,
        pred.h if abs(t[3]) < TW_CLAMP else 0.0,
    ])


def cell_loss_and_subgradients(t: np.ndarray, a: Assignment, cfg: DetectorConfig,
                               tol: float = 0.0) -> tuple[float, list[np.ndarray]]:
    """CIoU of one assigned cell and its (tx, ty, tw, th) gradients near edge kinks (see ciou_subgradients)."""
    pred = decode_cell(t, a.gx, a.gy, a.scale, a.anchor, cfg)
    chain = _box_chain(t, pred, cfg.head_strides[a.scale])
    return ciou_loss(pred, a.box), [g * chain for g in ciou_subgradients(pred, a.box, tol)]


def coord_loss_and_grad(outputs: Sequence[np.ndarray], assignments: Sequence[Assignment],
                        cfg: DetectorConfig) -> tuple[float, list[np.ndarray]]:
    """Mean CIoU over assignments and its gradient w.r.t. each cell's (tx, ty, tw, th)."""
    if not assignments:
        return 0.0, []
    n = len(assignments)
    loss, grads = 0.0, []
    for a in assignments:
        t = _cell(outputs, cfg, a)[:4]
        pred = decode_cell(t, a.gx, a.gy, a.scale, a.anchor, cfg)
        loss += ciou_loss(pred, a.box)
        grads.append(ciou_gradient(pred, a.box) * _box_chain(t, pred, cfg.head_strides[a.scale]) / n)
    return loss / n, grads


def min_norm_point(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Point of smallest norm in the convex hull of ``vectors``."""
    if len(vectors) == 1:
        return np.asarray(vectors[0], dtype=np.float64)
    g = np.stack(vectors, axis=1)
    big = 1e3 * max(1.0, float(np.abs(g).max()))
    # non-negative least squares with a heavily weighted sum-to-one row
    lam, _ = nnls(np.vstack([g, np.full((1, g.shape[1]), big)]), np.concatenate([np.zeros(g.shape[0]), [big]]))
    lam = lam / lam.sum()
    return g @ lam


# edge-gap tolerances (pixels) tried at every descent step; 0 is the plain gradient
KINK_TOLERANCES = (0.0, 1e-6, 1e-4, 1e-2, 1.0)


def descend_coordinates(outputs: Sequence[np.ndarray], assignments: Sequence[Assignment],
                        cfg: DetectorConfig, steps: int = 200, lr: float = 1.0,
                        armijo: float = 1e-4) -> tuple[list[np.ndarray], list[float]]:
    """Descent on the box logits (tx, ty, tw, th) of the assigned cells.

    The coordinate loss is non-smooth where a predicted edge meets a
    ground-truth edge, and plain gradient steps stall in those valleys.
    Each step therefore tries the steepest-descent direction of every
    tolerance in ``KINK_TOLERANCES`` (minimum-norm point of the nearby
    one-sided gradients), line-searches each with Armijo backtracking, and
    takes the best. Every accepted step lowers the loss, so the history is
    monotone. Returns updated outputs and the loss before each step plus
    the final loss.
    """
    k = cfg.outputs_per_anchor
    n = len(assignments)
    if n == 0:
        return [np.array(o, dtype=np.float64) for o in outputs], [0.0]
    ts = np.array([_cell(outputs, cfg, a)[:4] for a in assignments])

    def loss_of(tv):
        return sum(ciou_loss(decode_cell(t, a.gx, a.gy, a.scale, a.anchor, cfg), a.box)
                   for t, a in zip(tv, assignments)) / n

    loss = loss_of(ts)
    history = []
    for _ in range(steps):
        history.append(loss)
        best = None
        for tol in KINK_TOLERANCES:
            direction = -np.array([min_norm_point(cell_loss_and_subgradients(t, a, cfg, tol)[1])
                                   for t, a in zip(ts, assignments)]) / n
            slope = float(np.sum(direction * direction))
            if slope == 0.0:
                continue
            step = lr
            while step > 1e-14:
                trial = ts + step * direction
                new = loss_of(trial)
                if new <= loss - armijo * step * slope:
                    if best is None or new < best[0]:
                        best = (new, trial, step)
                    break
                step *= 0.5
        if best is None:
            break
        loss, ts, step = best
        lr = min(step * 2.0, 1e3)
    history.append(loss)
    outs = [np.array(o, dtype=np.float64) for o in outputs]
    for t, a in zip(ts, assignments):
        outs[a.scale][a.anchor * k:a.anchor * k + 4, a.gy, a.gx] = t
    return outs, history


# ---------------------------------------------------------------------------
# Anchors

def kmeans_anchors(wh: np.ndarray, k: int = 12, seed: int = 0, iters: int = 100) -> np.ndarray:
    """k-means over box sizes with ``1 - centered IoU`` distance, sorted by area."""
    wh = np.asarray(wh, dtype=np.float64)
    if len(wh) < k:
        raise ValueError(f"need at least {k} boxes for {k} anchors, got {len(wh)}")
    rng = np.random.default_rng(seed)
    centers = wh[rng.choice(len(wh), k, replace=False)]
    for _ in range(iters):
        inter = np.minimum(wh[:, None, 0], centers[None, :, 0]) * np.minimum(wh[:, None, 1], centers[None, :, 1])
        ious = inter / (wh[:, None].prod(-1) + centers[None].prod(-1) - inter)
        nearest = ious.argmax(axis=1)
        new = np.array([wh[nearest == j].mean(axis=0) if np.any(nearest == j) else centers[j] for j in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    return centers[np.argsort(centers.prod(axis=1), kind="stable")]


def anchors_from_boxes(wh: np.ndarray, per_scale: int = 3, seed: int = 0) -> tuple:
    centers = kmeans_anchors(wh, 4 * per_scale, seed)
    return tuple(tuple((float(w), float(h)) for w, h in centers[i * per_scale:(i + 1) * per_scale])
                 for i in range(4))


# ---------------------------------------------------------------------------
# Weight file: b"DW1\n", u32 section count, then per section
#   u32 name length, name (utf-8), u32 crc32 of the blob, u64 blob length, DT1 blob.

DW1_MAGIC = b"DW1\n"


def dumps_weights(state: dict[str, np.ndarray]) -> bytes:
    parts = [DW1_MAGIC, struct.pack("<I", len(state))]
    for name in sorted(state):
        raw = name.encode("utf-8")
        blob = T.dt1_dumps(state[name])
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<IQ", zlib.crc32(blob), len(blob)), blob]
    return b"".join(parts)


def loads_weights(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != DW1_MAGIC:
        raise WeightError("<header>", "bad DW1 magic")
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
    except struct.error:
        raise WeightError("<header>", "truncated section count") from None
    off = 8
    state: dict[str, np.ndarray] = {}
    for idx in range(count):
        section = f"<section {idx}>"
        try:
            (n,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + n].decode("utf-8")
            section = name or section
            off += 4 + n
            crc, size = struct.unpack_from("<IQ", buf, off)
            off += 12
            blob = buf[off:off + size]
        except (struct.error, UnicodeDecodeError) as exc:
            raise WeightError(section, f"malformed section header ({exc})") from None
        if len(blob) != size:
            raise WeightError(section, "truncated tensor blob")
        if zlib.crc32(blob) != crc:
            raise WeightError(section, "checksum mismatch (corrupted tensor data)")
        try:
            state[name] = T.dt1_loads(blob)
        except ValueError as exc:
            raise WeightError(section, str(exc)) from None
        off += size
    if off != len(buf):
        raise WeightError("<trailer>", f"{len(buf) - off} unexpected trailing bytes")
    return state


def save_weights(path, detector: Module) -> None:
    Path(path).write_bytes(dumps_weights(detector.state_dict()))


def load_weights(path, detector: Module) -> Module:
    detector.load_state_dict(loads_weights(Path(path).read_bytes()))
    return detector


# ---------------------------------------------------------------------------

def detect(detector: Detector, image_chw: np.ndarray, score_threshold: float = 0.25,
           nms_threshold: float = 0.45, max_candidates: int = 3000, max_det: int = 300) -> list[Detection]:
    """forward -> decode -> NMS on an already letterboxed ``3 x S x S`` image."""
    dets = decode(detector(image_chw), detector.config, score_threshold, max_candidates)
    return nms(dets, nms_threshold)[:max_det]


def toy_weights_from_logits(detector: Detector, scale: int, anchor: int, box_logits: Sequence[float],
                            class_id: int, obj_logit: float = 8.0, cls_logit: float = 8.0) -> Detector:
    """Set one head's output layer to emit fixed logits at every cell.

    The chosen anchor predicts ``box_logits`` with high objectness and the
    given class; all other anchors get strongly negative objectness. Meant
    for pipeline checks with logits obtained by coordinate descent.
    """
    cfg = detector.config
    k = cfg.outputs_per_anchor
    pred = detector.heads[scale].pred
    pred.params["weight"] = np.zeros_like(pred.params["weight"])
    bias = np.full(pred.params["bias"].shape, -cls_logit, dtype=T.DTYPE)
    for a in range(cfg.num_anchors):
        bias[a * k + 4] = -obj_logit
    bias[anchor * k:anchor * k + 4] = np.asarray(box_logits, dtype=T.DTYPE)
    bias[anchor * k + 4] = obj_logit
    bias[anchor * k + 5 + class_id] = cls_logit
    pred.params["bias"] = bias
    for s, head in enumerate(detector.heads):
        if s != scale:
            hb = np.full(head.pred.params["bias"].shape, -cls_logit, dtype=T.DTYPE)
            head.pred.params["weight"] = np.zeros_like(head.pred.params["weight"])
            head.pred.params["bias"] = hb
    return detector
