"""CBAM gating and Swin-style windowed self-attention.

CBAM operates on channel-major ``C x H x W`` maps. The window attention
functions operate on ``H x W x C`` maps; :class:`STRBlockPair` converts at
its boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .blocks import Module


# ---------------------------------------------------------------------------
# CBAM

def channel_attention(feat: np.ndarray, w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
    """Channel gate ``sigmoid(MLP(avg) + MLP(max))`` of shape ``C x 1 x 1``.

    The MLP is shared: ``w1 @ relu(w0 @ v)`` with ``w0`` of shape
    ``(C/r, C)`` and ``w1`` of shape ``(C, C/r)``.
    """
    c = feat.shape[0]
    if w0.shape[1] != c or w1.shape != (c, w0.shape[0]):
        raise T.ShapeError(f"channel attention weights {w0.shape}, {w1.shape} do not fit {c} channels")
    avg = T.global_pool(feat, "avg").reshape(c).astype(np.float64)
    mx = T.global_pool(feat, "max").reshape(c).astype(np.float64)
    w0 = w0.astype(np.float64)
    w1 = w1.astype(np.float64)

    def mlp(v):
        return w1 @ np.maximum(w0 @ v, 0.0)

    return T.sigmoid(mlp(avg) + mlp(mx)).reshape(c, 1, 1)


def spatial_attention(feat: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Spatial gate: n x n conv over channel-wise [mean; max], then sigmoid. ``1 x H x W``."""
    x64 = feat.astype(np.float64)
    pooled = np.stack([x64.mean(axis=0), x64.max(axis=0)]).astype(T.DTYPE)
    n = weight.shape[-1]
    return T.sigmoid(T.conv2d(pooled, weight, None, 1, n // 2).astype(np.float64))


def cbam(feat: np.ndarray, w0: np.ndarray, w1: np.ndarray, spatial_weight: np.ndarray) -> np.ndarray:
    """Channel gate then spatial gate, each applied by elementwise multiplication."""
    refined = (channel_attention(feat, w0, w1) * feat).astype(T.DTYPE)
    return (spatial_attention(refined, spatial_weight) * refined).astype(T.DTYPE)


class CBAM(Module):
    def __init__(self, c: int, reduction: int = 16, kernel: int = 7):
        super().__init__()
        if c % reduction:
            raise ValueError(f"CBAM channels {c} not divisible by reduction {reduction}")
        self.c, self.reduction, self.kernel = c, reduction, kernel
        hidden = c // reduction
        self.param("mlp_w0", (hidden, c), fan_in=c)
        self.param("mlp_w1", (c, hidden), fan_in=hidden)
        self.param("spatial_weight", (1, 2, kernel, kernel), fan_in=2 * kernel * kernel)

    def forward(self, x):
        p = self.params
        return cbam(x, p["mlp_w0"], p["mlp_w1"], p["spatial_weight"])

    def macs(self, x_shape, y_shape):
        c, h, w = x_shape
        hidden = c // self.reduction
        return 4 * c * hidden + 2 * self.kernel ** 2 * h * w + 2 * c * h * w


# ---------------------------------------------------------------------------
# Windows

@dataclass(frozen=True)
class WindowGrid:
    height: int
    width: int
    padded_height: int
    padded_width: int
    m: int

    @property
    def rows(self) -> int:
        return self.padded_height // self.m

    @property
    def cols(self) -> int:
        return self.padded_width // self.m

    @property
    def n_windows(self) -> int:
        return self.rows * self.cols


def window_partition(feat: np.ndarray, m: int) -> tuple[np.ndarray, WindowGrid]:
    """Split ``H x W x C`` into ``(nW, m*m, C)`` non-overlapping windows (zero padded)."""
    if m < 1:
        raise ValueError(f"window size must be >= 1, got {m}")
    h, w, c = feat.shape
    hp, wp = -(-h // m) * m, -(-w // m) * m
    if (hp, wp) != (h, w):
        feat = np.pad(feat, ((0, hp - h), (0, wp - w), (0, 0)))
    grid = WindowGrid(h, w, hp, wp, m)
    win = feat.reshape(grid.rows, m, grid.cols, m, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(win.reshape(grid.n_windows, m * m, c)), grid


def window_reverse(windows: np.ndarray, grid: WindowGrid) -> np.ndarray:
    m = grid.m
    c = windows.shape[-1]
    feat = windows.reshape(grid.rows, grid.cols, m, m, c).transpose(0, 2, 1, 3, 4)
    feat = feat.reshape(grid.padded_height, grid.padded_width, c)
    return np.ascontiguousarray(feat[:grid.height, :grid.width])


def _region_ids(hp: int, wp: int, m: int, shift: int) -> np.ndarray:
    ids = np.zeros((hp, wp), dtype=np.int64)
    if shift == 0:
        return ids
    bands = lambda n: (slice(0, n - m), slice(n - m, n - shift), slice(n - shift, n))  # noqa: E731
    label = 0
    for hs in bands(hp):
        for ws in bands(wp):
            ids[hs, ws] = label
            label += 1
    return ids


def attention_mask(h: int, w: int, m: int, shift: int) -> np.ndarray:
    """Additive ``(nW, m*m, m*m)`` mask (0 or -inf) in the shifted frame.

    Tokens that came from different sides of the cyclic wrap may not attend to
    each other; real queries ignore zero-padding keys.
    """
    hp, wp = -(-h // m) * m, -(-w // m) * m
    ids = _region_ids(hp, wp, m, shift)
    padded = np.ones((hp, wp), dtype=bool)
    padded[:h, :w] = False
    if shift:
        padded = np.roll(padded, (-shift, -shift), axis=(0, 1))
    id_win, _ = window_partition(ids[..., None], m)
    pad_win, _ = window_partition(padded[..., None], m)
    id_win, pad_win = id_win[..., 0], pad_win[..., 0].astype(bool)
    blocked = id_win[:, :, None] != id_win[:, None, :]
    blocked |= pad_win[:, None, :] & ~pad_win[:, :, None]
    return np.where(blocked, -np.inf, 0.0)


def _linear(x, p, name):
    return x @ p[f"{name}_weight"].astype(np.float64).T + p[f"{name}_bias"].astype(np.float64)


def window_attention(feat: np.ndarray, params: Mapping[str, np.ndarray], m: int, heads: int,
                     shift: int = 0, scale: bool = True, return_attention: bool = False):
    """Multi-head self-attention inside ``m x m`` windows of an ``H x W x C`` map.

    ``params`` holds ``{q,k,v,o}_weight`` of shape (C, C) and ``{q,k,v,o}_bias``.
    With ``shift > 0`` the map is rolled by ``(-shift, -shift)`` first and
    rolled back afterwards, with the wrap mask applied. ``scale`` multiplies
    the logits by ``1/sqrt(C/heads)``.
    """
    h, w, c = feat.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by {heads} heads")
    d = c // heads
    hp, wp = -(-h // m) * m, -(-w // m) * m
    x = np.pad(feat.astype(np.float64), ((0, hp - h), (0, wp - w), (0, 0)))
    if shift:
        x = np.roll(x, (-shift, -shift), axis=(0, 1))
    windows, grid = window_partition(x, m)
    mask = attention_mask(h, w, m, shift)
    nw, n_tok, _ = windows.shape

    def split_heads(t):
        return t.reshape(nw, n_tok, heads, d).transpose(0, 2, 1, 3)

    q = split_heads(_linear(windows, params, "q"))
    k = split_heads(_linear(windows, params, "k"))
    v = split_heads(_linear(windows, params, "v"))
    logits = q @ k.transpose(0, 1, 3, 2)
    if scale:
        logits = logits / math.sqrt(d)
    attn = T.softmax_lastaxis(logits + mask[:, None])
    z = (attn @ v).transpose(0, 2, 1, 3).reshape(nw, n_tok, c)
    out = window_reverse(_linear(z, params, "o"), grid)
    if shift:
        out = np.roll(out, (shift, shift), axis=(0, 1))
    out = out[:h, :w]
    out = np.ascontiguousarray(out, dtype=T.DTYPE)
    return (out, attn) if return_attention else out


def w_msa(feat, params, m: int, heads: int, scale: bool = True, return_attention: bool = False):
    return window_attention(feat, params, m, heads, 0, scale, return_attention)


def sw_msa(feat, params, m: int, heads: int, shift: int | None = None, scale: bool = True,
           return_attention: bool = False):
    shift = m // 2 if shift is None else shift
    return window_attention(feat, params, m, heads, shift, scale, return_attention)


def _mlp(x, p):
    hidden = T.activation("gelu", _linear(x.astype(np.float64), p, "fc1"))
    return _linear(hidden.astype(np.float64), p, "fc2").astype(T.DTYPE)


def str_block(z: np.ndarray, p: Mapping[str, np.ndarray], m: int, heads: int, shift: int,
              scale: bool = True, residual: bool = True) -> np.ndarray:
    """LN -> (S)W-MSA -> residual, then LN -> MLP -> residual, on ``H x W x C``."""
    attn = window_attention(T.layer_norm(z, p["norm1_gamma"], p["norm1_beta"]), p, m, heads, shift, scale)
    z_hat = attn + z if residual else attn
    out = _mlp(T.layer_norm(z_hat, p["norm2_gamma"], p["norm2_beta"]), p)
    return out + z_hat if residual else out


def str_block_pair(z: np.ndarray, params: tuple[Mapping, Mapping], m: int, heads: int,
                   scale: bool = True, residual: bool = True) -> np.ndarray:
    """W-MSA block followed by an SW-MSA block (shift ``m // 2``)."""
    z = str_block(z, params[0], m, heads, 0, scale, residual)
    return str_block(z, params[1], m, heads, m // 2, scale, residual)


class STRBlock(Module):
    def __init__(self, c: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        hidden = c * mlp_ratio
        for norm in ("norm1", "norm2"):
            self.param(f"{norm}_gamma", (c,), init="ones")
            self.param(f"{norm}_beta", (c,), init="zeros")
        for proj in ("q", "k", "v", "o"):
            self.param(f"{proj}_weight", (c, c), fan_in=c)
            self.param(f"{proj}_bias", (c,), fan_in=c)
        self.param("fc1_weight", (hidden, c), fan_in=c)
        self.param("fc1_bias", (hidden,), fan_in=c)
        self.param("fc2_weight", (c, hidden), fan_in=hidden)
        self.param("fc2_bias", (c,), fan_in=hidden)


class STRBlockPair(Module):
    """Two consecutive transformer encoder blocks on a ``C x H x W`` map."""

    def __init__(self, c: int, window: int = 4, heads: int = 4, mlp_ratio: int = 4, scale: bool = True):
        super().__init__()
        if c % heads:
            raise ValueError(f"channels {c} not divisible by {heads} heads")
        self.c, self.window, self.heads, self.mlp_ratio, self.scale = c, window, heads, mlp_ratio, scale
        self.blk0 = self.add("blk0", STRBlock(c, heads, mlp_ratio))
        self.blk1 = self.add("blk1", STRBlock(c, heads, mlp_ratio))

    def forward(self, x):
        z = T.chw_to_hwc(x)
        z = str_block_pair(z, (self.blk0.params, self.blk1.params), self.window, self.heads, self.scale)
        return T.hwc_to_chw(z)

    def macs(self, x_shape, y_shape):
        c, h, w = x_shape
        per_block = complexity(h, w, c, self.window)["w_msa"] + 2 * h * w * c * c * self.mlp_ratio
        return 2 * per_block


def complexity(h: int, w: int, c: int, m: int) -> dict[str, int]:
    """Operation counts of global MSA and window MSA on an ``H x W x C`` map."""
    for name, v in (("H", h), ("W", w), ("C", c), ("m", m)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    h, w, c, m = int(h), int(w), int(c), int(m)
    hw = h * w
    shared = 4 * hw * c * c
    return {"msa": shared + 2 * hw * hw * c, "w_msa": shared + 2 * hw * m * m * c}
