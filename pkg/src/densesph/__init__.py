"""Dense-CSP YOLO-style road-damage detector with windowed-attention heads, in numpy."""

__version__ = "0.1.0"
