"""Dense float32 tensor primitives for the forward pass.

Tensors are plain ``numpy.ndarray`` objects with ``float32`` dtype and
row-major layout. Convolutional feature maps are channel-major ``C x H x W``;
the attention modules work on ``H x W x C`` and convert with
:func:`chw_to_hwc` / :func:`hwc_to_chw`.

Reductions are accumulated in float64 and rounded once to float32 so that
results do not depend on summation strategy.
"""
from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

DTYPE = np.float32
DT1_MAGIC = b"DT1\n"


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float32 tensor from nested sequences or a flat buffer."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"dimension sizes must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_window(h: int, w: int, k: int, stride: int, padding: int) -> None:
    if k <= 0 or stride <= 0:
        raise ShapeError(f"kernel and stride must be positive, got k={k} stride={stride}")
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel {k} larger than padded input {h}x{w} (padding {padding})")


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of a ``C x H x W`` map with ``O x C x k x k`` filters.

    Zero padding. Each output element is the float64 sum over (c, ky, kx),
    rounded to float32.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and O x C x k x k weight, "
                         f"got {x.shape} and {weight.shape}")
    c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weight expects {wc}")
    if kh != kw:
        raise ShapeError(f"conv2d expects square kernels, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    _check_window(h, w, kh, stride, padding)

    x64 = x.astype(np.float64)
    if padding:
        x64 = np.pad(x64, ((0, 0), (padding, padding), (padding, padding)))
    w64 = weight.astype(np.float64)
    if kh == 1:
        cols = x64[:, ::stride, ::stride]
        out = np.tensordot(w64[:, :, 0, 0], cols, axes=(1, 0))
    else:
        win = sliding_window_view(x64, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        out = np.tensordot(w64, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias.astype(np.float64)[:, None, None]
    return out.astype(DTYPE)


def pool2d(x: np.ndarray, kind: str, k: int, stride: int, padding: int = 0) -> np.ndarray:
    """Max or average pooling over a ``C x H x W`` map.

    Max pooling pads with -inf; average pooling excludes padded cells from the
    divisor.
    """
    if x.ndim != 3:
        raise ShapeError(f"pool2d expects C x H x W input, got {x.shape}")
    _, h, w = x.shape
    _check_window(h, w, k, stride, padding)
    x64 = x.astype(np.float64)
    pad = ((0, 0), (padding, padding), (padding, padding))
    if kind == "max":
        if padding:
            x64 = np.pad(x64, pad, constant_values=-np.inf)
        win = sliding_window_view(x64, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        return win.max(axis=(3, 4)).astype(DTYPE)
    if kind == "avg":
        ones = np.ones((1, h, w))
        if padding:
            x64 = np.pad(x64, pad)
            ones = np.pad(ones, pad)
        total = sliding_window_view(x64, (k, k), axis=(1, 2))[:, ::stride, ::stride].sum(axis=(3, 4))
        count = sliding_window_view(ones, (k, k), axis=(1, 2))[:, ::stride, ::stride].sum(axis=(3, 4))
        return (total / count).astype(DTYPE)
    raise ValueError(f"unknown pooling kind {kind!r}")


def global_pool(x: np.ndarray, kind: str) -> np.ndarray:
    """Per-channel reduction of ``C x H x W`` to ``C x 1 x 1``."""
    if x.ndim != 3:
        raise ShapeError(f"global_pool expects C x H x W input, got {x.shape}")
    x64 = x.astype(np.float64)
    if kind == "avg":
        out = x64.mean(axis=(1, 2))
    elif kind == "max":
        out = x64.max(axis=(1, 2))
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return out.reshape(-1, 1, 1).astype(DTYPE)


def sigmoid(x):
    return special.expit(x)


def activation(kind: str, x: np.ndarray, alpha: float = 0.1) -> np.ndarray:
    """Elementwise activation.

    ``kind`` is one of ``sigmoid``, ``silu``, ``leaky_relu``, ``mish``,
    ``gelu`` or ``identity``. GELU uses the exact erf form.
    """
    x64 = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        out = special.expit(x64)
    elif kind == "silu":
        out = x64 * special.expit(x64)
    elif kind == "leaky_relu":
        out = np.where(x64 < 0, alpha * x64, x64)
    elif kind == "mish":
        out = x64 * np.tanh(np.logaddexp(0.0, x64))
    elif kind == "gelu":
        out = 0.5 * x64 * (1.0 + special.erf(x64 / np.sqrt(2.0)))
    elif kind == "relu":
        out = np.maximum(x64, 0.0)
    elif kind == "identity":
        out = x64
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out.astype(DTYPE)


def batch_norm_inference(x: np.ndarray, mean, var, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"batch_norm_inference expects C x H x W input, got {x.shape}")
    c = x.shape[0]
    params = [np.asarray(p, dtype=np.float64).reshape(-1) for p in (mean, var, gamma, beta)]
    if any(p.shape != (c,) for p in params):
        raise ShapeError(f"batch norm parameters must all have {c} entries")
    mean, var, gamma, beta = (p[:, None, None] for p in params)
    if np.any(var < 0):
        raise ValueError("batch norm variance must be non-negative")
    out = (x.astype(np.float64) - mean) / np.sqrt(var + eps) * gamma + beta
    return out.astype(DTYPE)


def layer_norm(x: np.ndarray, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    c = x.shape[-1]
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm parameters must have {c} entries")
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x64 - mu) / np.sqrt(var + eps) * gamma + beta).astype(DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(DTYPE)


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction. ``-inf`` entries get weight 0."""
    x64 = np.asarray(x, dtype=np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def concat(tensors: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat shapes incompatible on axis {axis}: {ref} vs {t.shape}")
    return np.concatenate(tensors, axis=axis).astype(DTYPE, copy=False)


def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"upsample expects C x H x W input, got {x.shape}")
    return x.repeat(2, axis=1).repeat(2, axis=2)


def chw_to_hwc(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"expected C x H x W, got {x.shape}")
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def hwc_to_chw(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"expected H x W x C, got {x.shape}")
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def numeric_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        hi, lo = float(f(x + step)), float(f(x - step))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite function value when perturbing coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# DT1 serialization

def dt1_dumps(t: np.ndarray) -> bytes:
    arr = np.asarray(t, dtype="<f4")
    head = DT1_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dt1_loads(buf: bytes) -> np.ndarray:
    t, used = _dt1_read(buf, 0)
    if used != len(buf):
        raise ValueError(f"trailing {len(buf) - used} bytes after DT1 tensor")
    return t


def _dt1_read(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    if buf[offset:offset + 4] != DT1_MAGIC:
        raise ValueError("bad DT1 magic")
    offset += 4
    if len(buf) < offset + 4:
        raise ValueError("truncated DT1 header")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + 4 * rank:
        raise ValueError("truncated DT1 dims")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    n = int(np.prod(dims)) if rank else 1
    end = offset + 4 * n
    if len(buf) < end:
        raise ValueError(f"truncated DT1 data: need {4 * n} bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(DTYPE).reshape(dims)
    return arr, end


def save_dt1(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dt1_dumps(t))


def load_dt1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return dt1_loads(fh.read())
