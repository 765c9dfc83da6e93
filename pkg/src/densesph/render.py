"""Draw detection boxes with class-identifier labels onto 8-bit images."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .boxes import Detection
from .data import CLASS_COLORS, CLASS_NAMES

# 3x5 bitmap glyphs, one string of 15 bits (row-major) per character
_GLYPHS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111", "3": "111001111001111",
    "4": "101101111001001", "5": "111100111001111", "6": "111100111101111", "7": "111001001001001",
    "8": "111101111101111", "9": "111101111001111", "D": "110101101101110", ".": "000000000000010",
    " ": "000000000000000",
}


def _draw_text(pixels: np.ndarray, x: int, y: int, text: str, color) -> None:
    h, w = pixels.shape[:2]
    for k, ch in enumerate(text):
        bits = _GLYPHS.get(ch, _GLYPHS[" "])
        for i, bit in enumerate(bits):
            if bit == "1":
                px, py = x + 4 * k + i % 3, y + i // 3
                if 0 <= px < w and 0 <= py < h:
                    pixels[py, px] = color


def draw_detections(pixels: np.ndarray, dets: Sequence[Detection], thickness: int = 1,
                    with_scores: bool = True) -> np.ndarray:
    """Return a copy of ``pixels`` with one outlined box and label per detection."""
    out = pixels.copy()
    h, w = out.shape[:2]
    for d in dets:
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        x1, y1, x2, y2 = d.box.corners
        x1, x2 = int(np.clip(np.floor(x1), 0, w - 1)), int(np.clip(np.ceil(x2) - 1, 0, w - 1))
        y1, y2 = int(np.clip(np.floor(y1), 0, h - 1)), int(np.clip(np.ceil(y2) - 1, 0, h - 1))
        for t in range(thickness):
            out[min(y1 + t, y2), x1:x2 + 1] = color
            out[max(y2 - t, y1), x1:x2 + 1] = color
            out[y1:y2 + 1, min(x1 + t, x2)] = color
            out[y1:y2 + 1, max(x2 - t, x1)] = color
        label = CLASS_NAMES[d.class_id] if d.class_id < len(CLASS_NAMES) else str(d.class_id)
        if with_scores:
            label += f" {d.score:.2f}"
        _draw_text(out, x1, y1 - 6 if y1 >= 6 else y1 + 2, label, color)
    return out
