"""Constant-width U-Net built on :mod:`ninn.autodiff`.

Every resolution level keeps the same channel count. The encoder halves the
resolution with 2x2 average pooling, the decoder restores it with
align-corners bilinear upsampling followed by a skip concatenation. With the
default identity activation the whole network is an affine map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ACTIVATIONS, DimensionError, Tape, Tensor
from .problems import ConfigurationError


@dataclass(frozen=True)
class NetworkSpec:
    depth: int
    input_shape: tuple
    channels: int = 32
    kernel_size: int = 5
    activation: str = "identity"
    output_kernel: Optional[int] = None  # defaults to kernel_size

    def __post_init__(self):
        if self.depth < 0:
            raise ConfigurationError(f"depth must be >= 0, got {self.depth}")
        if self.kernel_size % 2 == 0 or self.out_kernel % 2 == 0:
            raise ConfigurationError("kernel sizes must be odd")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        rows, cols = self.input_shape
        coarse = min(rows, cols) // 2**self.depth
        if coarse < self.kernel_size - 1:
            raise ConfigurationError(
                f"depth {self.depth} too large for input {rows}x{cols}: coarsest features are "
                f"{coarse} wide, need at least {self.kernel_size - 1} for {self.kernel_size}x{self.kernel_size} kernels"
            )

    @property
    def out_kernel(self) -> int:
        return self.kernel_size if self.output_kernel is None else self.output_kernel

    @staticmethod
    def max_depth(n: int, kernel_size: int = 5) -> int:
        d = 0
        while n // 2 ** (d + 1) >= kernel_size - 1:
            d += 1
        return d

    def layer_shapes(self) -> list:
        """``(name, (out, in, k, k))`` for every convolution in execution order."""
        c, k = self.channels, self.kernel_size
        shapes = []
        for level in range(self.depth):
            shapes.append((f"enc{level}a", (c, 1 if level == 0 else c, k, k)))
            shapes.append((f"enc{level}b", (c, c, k, k)))
        shapes.append(("bottom_a", (c, c if self.depth else 1, k, k)))
        shapes.append(("bottom_b", (c, c, k, k)))
        for level in reversed(range(self.depth)):
            shapes.append((f"dec{level}a", (c, 2 * c, k, k)))
            shapes.append((f"dec{level}b", (c, c, k, k)))
        shapes.append(("out", (1, c, self.out_kernel, self.out_kernel)))
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) + s[0] for _, s in self.layer_shapes())


@dataclass
class NetworkParams:
    names: list
    weights: list
    biases: list

    @property
    def count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def arrays(self) -> list:
        """Weights and biases interleaved: ``[w0, b0, w1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(list(self.names), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            list(self.names), [w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases]
        )


def glorot_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    cout, cin, kr, kc = shape
    limit = np.sqrt(6.0 / (cin * kr * kc + cout * kr * kc))
    return rng.uniform(-limit, limit, size=shape)


def build(spec: NetworkSpec, seed: int = 0, precision: str = "single") -> NetworkParams:
    dtype = ad.dtype_of(precision)
    rng = np.random.default_rng(seed)
    names, weights, biases = [], [], []
    for name, shape in spec.layer_shapes():
        names.append(name)
        weights.append(glorot_uniform(shape, rng).astype(dtype))
        biases.append(np.zeros(shape[0], dtype=dtype))
    return NetworkParams(names, weights, biases)


def forward(params: NetworkParams, spec: NetworkSpec, x, tape: Optional[Tape] = None) -> Tensor:
    """Apply the network to a ``(1, rows, cols)`` input.

    When ``tape`` is given every weight and bias is watched on it (in the order
    of :meth:`NetworkParams.arrays`), so ``tape.gradient(loss, tape.watched)``
    returns parameter gradients.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if x.shape != (1, *spec.input_shape):
        raise DimensionError(f"network input has shape {x.shape}, expected (1, {spec.input_shape[0]}, {spec.input_shape[1]})")
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype)) if not x.tracked else x
    if tape is not None:
        layers = [(tape.watch(w), tape.watch(b)) for w, b in zip(params.weights, params.biases)]
    else:
        layers = [(Tensor(w), Tensor(b)) for w, b in zip(params.weights, params.biases)]
    it = iter(layers)
    act = spec.activation

    def conv(t):
        w, b = next(it)
        return ad.activation(ad.conv2d(t, w, b, padding="same"), act)

    skips = []
    for _ in range(spec.depth):
        x = conv(conv(x))
        skips.append(x)
        x = ad.avg_pool2(x)
    x = conv(conv(x))
    for skip in reversed(skips):
        up = ad.bilinear_upsample(x, skip.shape[1], skip.shape[2])
        x = conv(conv(ad.concat_channels(skip, up)))
    w, b = next(it)
    return ad.conv2d(x, w, b, padding="same")


# ---------------------------------------------------------------------------
# checkpoints: b"NNP1", u32 layer count, then per layer
# u32 x4 kernel dims, u32 dtype flag (0 = f32, 1 = f64), weights, biases

_MAGIC = b"NNP1"


def save_params(params: NetworkParams, path) -> None:
    flag = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}[np.dtype(params.dtype)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params.weights)))
        for w, b in zip(params.weights, params.biases):
            fh.write(struct.pack("<5I", *w.shape, flag))
            dt = "<f4" if flag == 0 else "<f8"
            fh.write(np.ascontiguousarray(w, dtype=dt).tobytes())
            fh.write(np.ascontiguousarray(b, dtype=dt).tobytes())


def load_params(path, names: Optional[list] = None) -> NetworkParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    weights, biases = [], []
    for i in range(count):
        if pos + 20 > len(raw):
            raise ValueError(f"{path}: truncated header for layer {i} at byte {pos}")
        *shape, flag = struct.unpack_from("<5I", raw, pos)
        pos += 20
        if flag not in (0, 1):
            raise ValueError(f"{path}: bad dtype flag {flag} at byte {pos - 4}")
        dt = np.dtype("<f4" if flag == 0 else "<f8")
        nw = int(np.prod(shape))
        need = (nw + shape[0]) * dt.itemsize
        if pos + need > len(raw):
            raise ValueError(f"{path}: truncated data for layer {i} at byte {pos}")
        weights.append(np.frombuffer(raw, dt, nw, pos).reshape(shape).astype(dt.newbyteorder("=")))
        pos += nw * dt.itemsize
        biases.append(np.frombuffer(raw, dt, shape[0], pos).astype(dt.newbyteorder("=")))
        pos += shape[0] * dt.itemsize
    names = list(names) if names is not None else [f"layer{i}" for i in range(count)]
    return NetworkParams(names, weights, biases)
