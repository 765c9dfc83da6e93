"""Parameter containers and the convolutional building blocks of the backbone.

``Module`` is a deliberately small container: named parameters, named
children, deterministic initialization and a state-dict view used by the
weight file. Blocks are inference-only.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as T


class TraceRecord(NamedTuple):
    path: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    params: int
    macs: int


_TRACE: list[TraceRecord] | None = None


@contextlib.contextmanager
def trace():
    """Collect a ``TraceRecord`` for every module call made inside the block."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _shape_of(x) -> tuple:
    if isinstance(x, (list, tuple)):
        return tuple(tuple(t.shape) for t in x)
    return tuple(x.shape)


class WeightError(ValueError):
    """A weight section is missing, unexpected, malformed or of the wrong shape."""

    def __init__(self, section: str, message: str):
        super().__init__(f"weight section {section!r}: {message}")
        self.section = section


class Module:
    path = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self._init: dict[str, tuple[str, int]] = {}

    def param(self, name: str, shape: Sequence[int], init: str = "uniform", fan_in: int = 1) -> None:
        self.params[name] = np.zeros(tuple(shape), dtype=T.DTYPE)
        self._init[name] = (init, fan_in)
        if init == "ones":
            self.params[name][...] = 1.0

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules(prefix):
            for name, value in mod.params.items():
                yield (f"{path}.{name}" if path else name), value

    def assign_paths(self, prefix: str = "") -> None:
        for path, mod in self.named_modules(prefix):
            mod.path = path

    def num_parameters(self) -> int:
        return sum(int(v.size) for _, v in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Replace all parameters; every section is validated before anything is written."""
        own = dict(self.named_parameters())
        for name in state:
            if name not in own:
                raise WeightError(name, "unexpected section not present in the built graph")
        for name, value in own.items():
            if name not in state:
                raise WeightError(name, "missing section")
            if tuple(state[name].shape) != value.shape:
                raise WeightError(name, f"shape {tuple(state[name].shape)} does not match graph shape {value.shape}")
            if not np.all(np.isfinite(state[name])):
                raise WeightError(name, "non-finite values")
        for path, mod in self.named_modules():
            for pname in mod.params:
                full = f"{path}.{pname}" if path else pname
                mod.params[pname] = np.asarray(state[full], dtype=T.DTYPE).copy()

    def init_weights(self, seed: int = 0, uniform_range: float | None = None) -> "Module":
        """Deterministic random init.

        Weight tensors draw from U(-b, b) with ``b = 1/sqrt(fan_in)``, or
        ``b = uniform_range`` when given. Normalization parameters keep their
        identity values.
        """
        rng = np.random.default_rng(seed)
        for path, mod in self.named_modules():
            for name, (kind, fan_in) in mod._init.items():
                if kind != "uniform":
                    continue
                bound = uniform_range if uniform_range is not None else 1.0 / math.sqrt(fan_in)
                shape = mod.params[name].shape
                mod.params[name] = rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)
        return self

    def macs(self, x_shape, y_shape) -> int:
        return 0

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        y = self.forward(x)
        if _TRACE is not None:
            x_shape, y_shape = _shape_of(x), _shape_of(y)
            _TRACE.append(TraceRecord(self.path, type(self).__name__, x_shape, y_shape,
                                      self.num_parameters(), self.macs(x_shape, y_shape)))
        return y


class Conv2d(Module):
    """Plain convolution with bias (used for prediction outputs)."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.param("weight", (c_out, c_in, k, k), fan_in=c_in * k * k)
        self.param("bias", (c_out,), fan_in=c_in * k * k)

    def forward(self, x):
        return T.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.k // 2)

    def macs(self, x_shape, y_shape):
        return int(np.prod(y_shape)) * self.c_in * self.k * self.k


class ConvBNAct(Module):
    """Convolution, inference batch norm and activation (padding ``k // 2``)."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, act: str = "silu"):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride, self.act = c_in, c_out, k, stride, act
        self.param("weight", (c_out, c_in, k, k), fan_in=c_in * k * k)
        self.param("bn_mean", (c_out,), init="zeros")
        self.param("bn_var", (c_out,), init="ones")
        self.param("bn_gamma", (c_out,), init="ones")
        self.param("bn_beta", (c_out,), init="zeros")

    def forward(self, x):
        if x.shape[0] != self.c_in:
            raise T.ShapeError(f"{self.path or 'conv'}: expected {self.c_in} input channels, got {x.shape[0]}")
        y = T.conv2d(x, self.params["weight"], None, self.stride, self.k // 2)
        p = self.params
        y = T.batch_norm_inference(y, p["bn_mean"], p["bn_var"], p["bn_gamma"], p["bn_beta"])
        return T.activation(self.act, y)

    def macs(self, x_shape, y_shape):
        return int(np.prod(y_shape)) * self.c_in * self.k * self.k


def conv_bn_act(x: np.ndarray, unit: ConvBNAct) -> np.ndarray:
    return unit(x)


class Bottleneck(Module):
    """1x1 reduce to half width, 3x3 expand back, residual add."""

    def __init__(self, c: int, act: str = "silu"):
        super().__init__()
        hidden = max(c // 2, 1)
        self.cv1 = self.add("cv1", ConvBNAct(c, hidden, 1, act=act))
        self.cv2 = self.add("cv2", ConvBNAct(hidden, c, 3, act=act))

    def forward(self, x):
        return x + self.cv2(self.cv1(x))


class CSPBlock(Module):
    """Cross-stage partial block.

    The input channels are split evenly. The first half runs through
    ``depth`` bottlenecks, the second half bypasses; the halves are
    concatenated and fused by a 1x1 unit to ``c_out``.
    """

    def __init__(self, c_in: int, c_out: int, depth: int, act: str = "silu"):
        super().__init__()
        if c_in % 2:
            raise ValueError(f"CSP block needs an even channel count, got {c_in}")
        self.c_in, self.c_out, self.depth = c_in, c_out, depth
        half = c_in // 2
        self.blocks = [self.add(f"m{i}", Bottleneck(half, act)) for i in range(depth)]
        self.fuse = self.add("fuse", ConvBNAct(c_in, c_out, 1, act=act))

    def split(self, x):
        half = self.c_in // 2
        return x[:half], x[half:]

    def pre_fusion(self, x):
        processed, bypass = self.split(x)
        for b in self.blocks:
            processed = b(processed)
        return T.concat([processed, bypass], axis=0)

    def forward(self, x):
        if x.shape[0] != self.c_in:
            raise T.ShapeError(f"{self.path or 'csp'}: expected {self.c_in} channels, got {x.shape[0]}")
        return self.fuse(self.pre_fusion(x))


class DenseBlock(Module):
    """Densely connected stack: layer i sees the input and all earlier outputs.

    Each layer is a 3x3 conv unit producing ``growth`` channels; the block
    returns the concatenation of the input and every layer output, so it has
    ``c_in + n * growth`` channels.
    """

    def __init__(self, c_in: int, n: int = 4, growth: int = 16, act: str = "silu"):
        super().__init__()
        if n < 1:
            raise ValueError(f"dense block needs at least one layer, got {n}")
        self.c_in, self.n, self.growth = c_in, n, growth
        self.c_out = c_in + n * growth
        self.layers = [self.add(f"layer{i}", ConvBNAct(c_in + i * growth, growth, 3, act=act))
                       for i in range(n)]

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(T.concat(feats, axis=0)))
        return T.concat(feats, axis=0)


def dense_block(x: np.ndarray, block: DenseBlock) -> np.ndarray:
    return block(x)


class SPPBlock(Module):
    """Spatial pyramid pooling: stride-1 max pools concatenated with the input, fused back to C."""

    def __init__(self, c: int, kernels: Sequence[int] = (5, 9, 13), act: str = "silu"):
        super().__init__()
        self.c, self.kernels = c, tuple(kernels)
        self.fuse = self.add("fuse", ConvBNAct(c * (len(self.kernels) + 1), c, 1, act=act))

    def pooled(self, x):
        need = max(self.kernels) // 2
        if x.shape[1] < need or x.shape[2] < need:
            raise T.ShapeError(f"SPP needs spatial size >= {need}, got {x.shape[1]}x{x.shape[2]}")
        return T.concat([x] + [T.pool2d(x, "max", k, 1, k // 2) for k in self.kernels], axis=0)

    def forward(self, x):
        return self.fuse(self.pooled(x))

    def macs(self, x_shape, y_shape):
        return int(np.prod(x_shape)) * sum(k * k for k in self.kernels)
