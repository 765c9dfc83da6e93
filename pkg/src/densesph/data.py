"""Annotations, splits, image I/O, letterboxing, augmentation and a synthetic dataset.

Images are float32 ``H x W x 3`` arrays in [0, 1]; on disk they are binary
PPM (P6, maxval 255). Annotation boxes are kept in corner coordinates so
that VOC write/read is an exact roundtrip.
"""
from __future__ import annotations

import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .boxes import Box
from .metrics import GroundTruth

CLASS_NAMES = ("D00", "D01", "D10", "D11", "D20", "D40", "D43", "D44")
CLASS_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
RDD2018_COUNTS = {"images": 9053, "boxes": 15435}
MIN_KEEP_FRACTION = 0.01
PAD_VALUE = 114 / 255


def class_index(name: str) -> int:
    try:
        return CLASS_INDEX[name]
    except KeyError:
        raise ValueError(f"unknown class identifier {name!r}; expected one of {', '.join(CLASS_NAMES)}") from None


def class_name(index: int) -> str:
    if not 0 <= index < len(CLASS_NAMES):
        raise ValueError(f"class index {index} outside 0..{len(CLASS_NAMES) - 1}")
    return CLASS_NAMES[index]


class Annotation(NamedTuple):
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def box(self) -> Box:
        return Box.from_corners(self.x1, self.y1, self.x2, self.y2)

    def ground_truth(self) -> GroundTruth:
        return GroundTruth(self.box, self.class_id)


@dataclass
class ImageAnnotation:
    image_id: str
    width: int
    height: int
    objects: list[Annotation] = field(default_factory=list)
    clamped: int = 0

    def ground_truths(self) -> list[GroundTruth]:
        return [o.ground_truth() for o in self.objects]


class AnnotationError(ValueError):
    """One or more problems in an annotation document, each naming file and object."""

    def __init__(self, problems: Sequence[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


# ---------------------------------------------------------------------------
# VOC XML

def _num(text: str | None) -> float:
    if text is None:
        raise ValueError("missing value")
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {text!r}")
    return v


def parse_voc(data: bytes | str, source: str = "<memory>") -> ImageAnnotation:
    """Parse one VOC-style document (size, object/name, object/bndbox).

    Boxes are clamped into the image; ``clamped`` counts how many were
    changed. All object-level problems are collected and raised together.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise AnnotationError([f"{source}: malformed XML ({exc})"]) from None
    problems = []
    size = root.find("size")
    try:
        width = int(_num(size.findtext("width")))
        height = int(_num(size.findtext("height")))
        if width <= 0 or height <= 0:
            raise ValueError(f"non-positive size {width}x{height}")
    except (AttributeError, ValueError) as exc:
        raise AnnotationError([f"{source}: bad <size> ({exc})"]) from None
    filename = root.findtext("filename")
    image_id = Path(filename).stem if filename else Path(source).stem
    objects, clamped = [], 0
    for idx, obj in enumerate(root.findall("object")):
        where = f"{source}: object {idx}"
        name = (obj.findtext("name") or "").strip()
        if name not in CLASS_INDEX:
            problems.append(f"{where}: unknown class {name!r}")
            continue
        bb = obj.find("bndbox")
        try:
            x1, y1, x2, y2 = (_num(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
        except (AttributeError, ValueError) as exc:
            problems.append(f"{where}: bad <bndbox> ({exc})")
            continue
        if x2 <= x1 or y2 <= y1:
            problems.append(f"{where}: inverted or empty box ({x1}, {y1}, {x2}, {y2})")
            continue
        cx1, cy1 = min(max(x1, 0.0), width), min(max(y1, 0.0), height)
        cx2, cy2 = min(max(x2, 0.0), width), min(max(y2, 0.0), height)
        if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
            clamped += 1
            if cx2 <= cx1 or cy2 <= cy1:
                problems.append(f"{where}: box lies outside the {width}x{height} image")
                continue
        objects.append(Annotation(CLASS_INDEX[name], cx1, cy1, cx2, cy2))
    if problems:
        raise AnnotationError(problems)
    return ImageAnnotation(image_id, width, height, objects, clamped)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_voc(anno: ImageAnnotation) -> bytes:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = f"{anno.image_id}.ppm"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(anno.width)
    ET.SubElement(size, "height").text = str(anno.height)
    ET.SubElement(size, "depth").text = "3"
    for o in anno.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = CLASS_NAMES[o.class_id]
        bb = ET.SubElement(obj, "bndbox")
        for key, v in zip(("xmin", "ymin", "xmax", "ymax"), (o.x1, o.y1, o.x2, o.y2)):
            ET.SubElement(bb, key).text = _fmt(v)
    ET.indent(root)
    return ET.tostring(root, encoding="utf-8") + b"\n"


def read_voc(path) -> ImageAnnotation:
    path = Path(path)
    return parse_voc(path.read_bytes(), str(path))


def write_voc(path, anno: ImageAnnotation) -> None:
    Path(path).write_bytes(serialize_voc(anno))


def read_voc_dir(directory) -> dict[str, ImageAnnotation]:
    """All ``*.xml`` files of a directory keyed by image id; problems from every file are reported."""
    out, problems = {}, []
    for path in sorted(Path(directory).glob("*.xml")):
        try:
            anno = read_voc(path)
        except AnnotationError as exc:
            problems += exc.problems
            continue
        if anno.image_id in out:
            problems.append(f"{path}: duplicate image id {anno.image_id!r}")
        out[anno.image_id] = anno
    if problems:
        raise AnnotationError(problems)
    return out


def check_counts(annos: Iterable[ImageAnnotation], expected: dict = RDD2018_COUNTS) -> None:
    """Raise if image and box totals differ from the published dataset totals."""
    annos = list(annos)
    got = {"images": len(annos), "boxes": sum(len(a.objects) for a in annos)}
    if got != expected:
        raise ValueError(f"dataset totals {got} differ from expected {expected}")


# ---------------------------------------------------------------------------
# Split

def split(ids: Iterable[str], seed: int = 0, train_fraction: float = 0.8) -> tuple[list[str], list[str]]:
    """Deterministic shuffle of the sorted ids; the first ``round(n * fraction)`` are training ids."""
    ids = sorted(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in split input")
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError(f"train fraction {train_fraction} outside [0, 1]")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(math.floor(len(ids) * train_fraction + 0.5))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


# ---------------------------------------------------------------------------
# PPM

def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def encode_ppm(pixels: np.ndarray) -> bytes:
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM needs uint8 H x W x 3 pixels, got {pixels.dtype} {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_ppm(data: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(data)
    if not m:
        raise ValueError("not a binary PPM (P6) image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    body = data[m.end():]
    if len(body) < w * h * 3:
        raise ValueError(f"truncated PPM: need {w * h * 3} bytes, have {len(body)}")
    return np.frombuffer(body[:w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    pixels = image if image.dtype == np.uint8 else to_bytes(image)
    Path(path).write_bytes(encode_ppm(pixels))


def read_ppm(path) -> np.ndarray:
    return from_bytes(decode_ppm(Path(path).read_bytes()))


# ---------------------------------------------------------------------------
# Geometry helpers

def resize_nearest(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    rows = np.minimum(((np.arange(new_h) + 0.5) * h / new_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(new_w) + 0.5) * w / new_w).astype(np.int64), w - 1)
    return image[rows[:, None], cols[None, :]]


def _clip_keep(objs: Iterable[Annotation], x0: float, y0: float, x1: float, y1: float) -> list[Annotation]:
    """Clip boxes to a rectangle; drop those keeping less than 1% of their area."""
    out = []
    for o in objs:
        cx1, cy1 = max(o.x1, x0), max(o.y1, y0)
        cx2, cy2 = min(o.x2, x1), min(o.y2, y1)
        if cx2 <= cx1 or cy2 <= cy1:
            continue
        clipped = Annotation(o.class_id, cx1, cy1, cx2, cy2)
        if clipped.area < MIN_KEEP_FRACTION * o.area:
            continue
        out.append(clipped)
    return out


def _affine(objs: Iterable[Annotation], s: float, ox: float, oy: float) -> list[Annotation]:
    return [Annotation(o.class_id, o.x1 * s + ox, o.y1 * s + oy, o.x2 * s + ox, o.y2 * s + oy) for o in objs]


@dataclass(frozen=True)
class Letterbox:
    """Mapping between source image coordinates and the padded square input."""
    scale: float
    pad_x: int
    pad_y: int
    src_width: int
    src_height: int
    size: int

    def forward_box(self, box: Box) -> Box:
        x1, y1, x2, y2 = box.corners
        s = self.scale
        return Box.from_corners(x1 * s + self.pad_x, y1 * s + self.pad_y, x2 * s + self.pad_x, y2 * s + self.pad_y)

    def inverse_box(self, box: Box) -> Box | None:
        """Map back to the source image and clip; ``None`` if nothing is left."""
        x1, y1, x2, y2 = box.corners
        s = self.scale
        x1 = min(max((x1 - self.pad_x) / s, 0.0), self.src_width)
        x2 = min(max((x2 - self.pad_x) / s, 0.0), self.src_width)
        y1 = min(max((y1 - self.pad_y) / s, 0.0), self.src_height)
        y2 = min(max((y2 - self.pad_y) / s, 0.0), self.src_height)
        if x2 <= x1 or y2 <= y1:
            return None
        return Box.from_corners(x1, y1, x2, y2)


def letterbox(image: np.ndarray, objects: Sequence[Annotation] = (), size: int = 416
              ) -> tuple[np.ndarray, list[Annotation], Letterbox]:
    """Aspect-preserving nearest-neighbour resize into ``size x size`` with centered gray padding."""
    h, w = image.shape[:2]
    if h <= 0 or w <= 0:
        raise ValueError(f"image must have positive size, got {w}x{h}")
    scale = min(size / w, size / h)
    new_w, new_h = min(size, int(round(w * scale))), min(size, int(round(h * scale)))
    pad_x, pad_y = (size - new_w) // 2, (size - new_h) // 2
    canvas = np.full((size, size, image.shape[2]), PAD_VALUE, dtype=np.float32)
    canvas[pad_y:pad_y + new_h, pad_x:pad_x + new_w] = resize_nearest(image, new_h, new_w)
    lb = Letterbox(scale, pad_x, pad_y, w, h, size)
    return canvas, _affine(objects, scale, pad_x, pad_y), lb


# ---------------------------------------------------------------------------
# Augmentation

def mosaic(images: Sequence[np.ndarray], objects: Sequence[Sequence[Annotation]], size: int, seed: int = 0,
           center: tuple[int, int] | None = None) -> tuple[np.ndarray, list[Annotation]]:
    """Four-image mosaic around a center drawn uniformly from the middle half of the canvas.

    Each source is scaled to cover its quadrant with the corner nearest the
    center aligned to the center, so boxes map by ``x * s + offset``; boxes
    are clipped to their quadrant under the 1% keep rule.
    """
    if len(images) != 4 or len(objects) != 4:
        raise ValueError("mosaic needs exactly four images and four annotation lists")
    if center is None:
        rng = np.random.default_rng(seed)
        xc = int(rng.integers(size // 4, 3 * size // 4 + 1))
        yc = int(rng.integers(size // 4, 3 * size // 4 + 1))
    else:
        xc, yc = center
        if not (0 <= xc <= size and 0 <= yc <= size):
            raise ValueError(f"mosaic center {center} outside the {size}x{size} canvas")
    canvas = np.full((size, size, 3), PAD_VALUE, dtype=np.float32)
    out: list[Annotation] = []
    quads = [(0, 0, xc, yc), (xc, 0, size, yc), (0, yc, xc, size), (xc, yc, size, size)]
    for k, (img, objs, (qx0, qy0, qx1, qy1)) in enumerate(zip(images, objects, quads)):
        qw, qh = qx1 - qx0, qy1 - qy0
        if qw <= 0 or qh <= 0:
            continue
        h, w = img.shape[:2]
        s = max(qw / w, qh / h)
        ox = xc - w * s if k in (0, 2) else float(xc)
        oy = yc - h * s if k in (0, 1) else float(yc)
        cols = np.clip(np.floor((np.arange(qx0, qx1) + 0.5 - ox) / s).astype(np.int64), 0, w - 1)
        rows = np.clip(np.floor((np.arange(qy0, qy1) + 0.5 - oy) / s).astype(np.int64), 0, h - 1)
        canvas[qy0:qy1, qx0:qx1] = img[rows[:, None], cols[None, :]]
        out += _clip_keep(_affine(objs, s, ox, oy), qx0, qy0, qx1, qy1)
    return canvas, out


def mixup(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"mixup needs equal shapes, got {a.shape} and {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight {lam} outside [0, 1]")
    if lam == 1.0:
        return a.copy()
    if lam == 0.0:
        return b.copy()
    return (lam * a.astype(np.float64) + (1.0 - lam) * b.astype(np.float64)).astype(np.float32)


def mixup_boxes(oa: Sequence[Annotation], ob: Sequence[Annotation], lam: float) -> list[tuple[Annotation, float]]:
    """Union of both box sets with per-box weights ``lam`` and ``1 - lam``."""
    return [(o, lam) for o in oa] + [(o, 1.0 - lam) for o in ob]


def cutmix(a: np.ndarray, oa: Sequence[Annotation], b: np.ndarray, ob: Sequence[Annotation],
           region: tuple[int, int, int, int] | None = None, seed: int = 0) -> tuple[np.ndarray, list[Annotation]]:
    """Paste ``region`` (x1, y1, x2, y2) of ``b`` into ``a``.

    Boxes of ``b`` are clipped to the region (1% keep rule); boxes of ``a``
    stay unchanged unless less than 1% of them remains visible.
    """
    if a.shape != b.shape:
        raise ValueError(f"cutmix needs equal shapes, got {a.shape} and {b.shape}")
    h, w = a.shape[:2]
    if region is None:
        rng = np.random.default_rng(seed)
        rw, rh = int(rng.integers(w // 4, w // 2 + 1)), int(rng.integers(h // 4, h // 2 + 1))
        x1, y1 = int(rng.integers(0, w - rw + 1)), int(rng.integers(0, h - rh + 1))
        region = (x1, y1, x1 + rw, y1 + rh)
    x1, y1, x2, y2 = (int(v) for v in region)
    x1, x2 = max(0, min(x1, w)), max(0, min(x2, w))
    y1, y2 = max(0, min(y1, h)), max(0, min(y2, h))
    out = a.copy()
    if x2 <= x1 or y2 <= y1:
        return out, list(oa)
    out[y1:y2, x1:x2] = b[y1:y2, x1:x2]
    kept = []
    for o in oa:
        ix = max(0.0, min(o.x2, x2) - max(o.x1, x1))
        iy = max(0.0, min(o.y2, y2) - max(o.y1, y1))
        if o.area - ix * iy >= MIN_KEEP_FRACTION * o.area:
            kept.append(o)
    return out, kept + _clip_keep(ob, x1, y1, x2, y2)


def brightness(pixels: np.ndarray, factor: float) -> np.ndarray:
    """Scale 8-bit pixel values by ``factor`` (floor, clamped to 255)."""
    if factor < 0:
        raise ValueError(f"brightness factor must be non-negative, got {factor}")
    if factor == 1.0:
        return pixels.copy()
    return np.minimum(np.floor(pixels.astype(np.float64) * factor), 255).astype(np.uint8)


def grayscale(pixels: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma replicated over the three channels."""
    luma = pixels.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    g = np.minimum(np.floor(luma + 0.5), 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


# ---------------------------------------------------------------------------
# Synthetic dataset

# distinct, saturated colors per class so shapes stand out from the gray texture
CLASS_COLORS = np.array([
    [230, 40, 40], [40, 200, 40], [40, 80, 230], [230, 200, 30],
    [200, 40, 200], [30, 200, 210], [250, 250, 250], [20, 20, 20],
], dtype=np.uint8)


@dataclass
class Sample:
    annotation: ImageAnnotation
    pixels: np.ndarray  # uint8 H x W x 3

    @property
    def image(self) -> np.ndarray:
        return from_bytes(self.pixels)


def synth_image(index: int, seed: int, width: int = 320, height: int = 240) -> Sample:
    """One synthetic road-like image: noisy gray texture plus 1-4 colored shapes.

    Crack classes (D00-D11) are thin bars, the others filled rectangles. The
    generator of image ``index`` is seeded with ``(seed, index)``, so images
    are independent of how many others are generated.
    """
    rng = np.random.default_rng([seed, index])
    base = rng.integers(90, 140)
    pixels = np.clip(base + rng.integers(-12, 13, size=(height, width, 1)), 0, 255).astype(np.uint8)
    pixels = np.repeat(pixels, 3, axis=2)
    objects = []
    for _ in range(int(rng.integers(1, 5))):
        cls = int(rng.integers(0, len(CLASS_NAMES)))
        if cls < 4:
            long_side, short_side = int(rng.integers(40, 121)), int(rng.integers(6, 13))
            bw, bh = (long_side, short_side) if cls in (2, 3) else (short_side, long_side)
        else:
            bw, bh = int(rng.integers(16, 97)), int(rng.integers(16, 97))
        bw, bh = min(bw, width), min(bh, height)
        x1 = int(rng.integers(0, width - bw + 1))
        y1 = int(rng.integers(0, height - bh + 1))
        pixels[y1:y1 + bh, x1:x1 + bw] = CLASS_COLORS[cls]
        objects.append(Annotation(cls, float(x1), float(y1), float(x1 + bw), float(y1 + bh)))
    return Sample(ImageAnnotation(f"synth_{index:05d}", width, height, objects), pixels)


def synth_generate(n: int, seed: int = 0, width: int = 320, height: int = 240) -> list[Sample]:
    if n < 1:
        raise ValueError(f"need at least one image, got {n}")
    return [synth_image(i, seed, width, height) for i in range(n)]
