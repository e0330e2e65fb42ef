"""Dense rank-4 float32 tensors and their forward kernels.

A tensor is a plain C-contiguous ``numpy.ndarray`` of dtype float32 laid
out as (batch, channels, height, width). Kernels never mutate their inputs.
float64 inputs stay float64, which only the gradient-check tooling uses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import ShapeError

# Probing TBB warns when the system copy is too old; prefer the other layers.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from . import _kernels  # noqa: E402

DTYPE = np.float32

# Largest float32 strictly below 1 and smallest positive normal float32.
_SIGMOID_HI = np.float32(1.0) - np.float32(2.0**-24)
_SIGMOID_LO = np.finfo(np.float32).tiny


def _dtype(x):
    return np.float64 if getattr(x, "dtype", None) == np.float64 else DTYPE


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 rank-4 array."""
    arr = np.ascontiguousarray(x, dtype=_dtype(x))
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {arr.shape}")
    return arr


def set_num_threads(n: int) -> None:
    """Set the worker count for compiled kernels; 0 means all available."""
    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(limit if n <= 0 else min(n, limit))


@dataclass
class ConvKernel:
    """Square convolution kernel with bias and symmetric zero padding.

    ``name`` is only used to key gradients when the kernel runs on a tape.
    """

    weight: np.ndarray
    bias: np.ndarray
    padding: int | None = None
    name: str | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=_dtype(self.weight))
        self.bias = np.asarray(self.bias, dtype=self.weight.dtype)
        if self.weight.ndim != 4:
            raise ShapeError(f"kernel weight must be (out, in, kh, kw), got {self.weight.shape}")
        out_ch, _, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {out_ch} output channels")
        expected = 1 if kh == 3 else 0
        if self.padding is None:
            self.padding = expected
        elif self.padding != expected:
            raise ShapeError(f"{kh}x{kw} kernel requires padding {expected}, got {self.padding}")

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def zeros(cls, in_ch: int, out_ch: int, size: int = 3, bias: float = 0.0, name=None):
        return cls(np.zeros((out_ch, in_ch, size, size), DTYPE),
                   np.full(out_ch, bias, DTYPE), name=name)

    def flipped(self) -> "ConvKernel":
        """Kernel whose convolution computes the input gradient of this one."""
        w = np.ascontiguousarray(self.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return ConvKernel(w, np.zeros(self.in_ch, w.dtype), self.padding)


def _check_conv(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    x = as_tensor(x, "conv input")
    if x.shape[1] != kernel.in_ch:
        raise ShapeError(
            f"conv input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{kernel.weight.shape} expects {kernel.in_ch}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"conv input shape {x.shape} has an empty spatial dimension")
    return x


def conv2d_naive(x, kernel: ConvKernel) -> np.ndarray:
    """Reference convolution by direct summation over input channels and taps.

    Arithmetic runs in the input's dtype. Each output element accumulates in
    (channel, row, col) order starting from zero, then adds the bias.
    """
    x = _check_conv(x, kernel)
    n, c, h, w = x.shape
    k, pad = kernel.size, kernel.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    weight = kernel.weight.astype(x.dtype)
    acc = np.zeros((n, kernel.out_ch, h, w), x.dtype)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                window = xp[:, ci, i:i + h, j:j + w]
                acc += window[:, None] * weight[None, :, ci, i, j, None, None]
    acc += kernel.bias.astype(x.dtype)[None, :, None, None]
    return acc


def conv2d_lowered(x, kernel: ConvKernel) -> tuple[np.ndarray, np.ndarray]:
    """Fast convolution that also returns its (c*k*k, n*h*w) patch matrix."""
    x = _check_conv(x, kernel)
    n, _, h, w = x.shape
    cols = _kernels.im2col(x, kernel.size, kernel.padding)
    wmat = np.ascontiguousarray(kernel.weight.reshape(kernel.out_ch, -1), dtype=x.dtype)
    y = _kernels.gemm(wmat, cols).reshape(kernel.out_ch, n, h, w)
    y += kernel.bias.astype(x.dtype)[:, None, None, None]
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3)), cols


def conv2d_fast(x, kernel: ConvKernel) -> np.ndarray:
    """Convolution via patch-matrix lowering and a blocked matrix multiply."""
    return conv2d_lowered(x, kernel)[0]


conv2d = conv2d_fast


def matmul(a, b) -> np.ndarray:
    """Matrix product with each output accumulated in ascending inner index."""
    a = np.ascontiguousarray(a, dtype=_dtype(a))
    b = np.ascontiguousarray(b, dtype=a.dtype)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply matrices of shapes {a.shape} and {b.shape}")
    return _kernels.gemm(a, b)


def maxpool2x2(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and, per output element, the winning position
    inside its window (0..3, row-major; the first maximum wins ties).
    """
    x = as_tensor(x, "maxpool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got shape {x.shape}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    index = windows.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(windows, index[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), index


def upsample_nearest2x(x) -> np.ndarray:
    x = as_tensor(x, "upsample input")
    return np.ascontiguousarray(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def _same_shape(a, b, what):
    a = as_tensor(a, what)
    b = as_tensor(b, what)
    if a.shape != b.shape:
        raise ShapeError(f"{what} needs identical shapes, got {a.shape} and {b.shape}")
    return a, b


def elementwise(op: str, a, b) -> np.ndarray:
    a, b = _same_shape(a, b, f"elementwise {op}")
    if op == "mul":
        return a * b
    if op == "add":
        return a + b
    raise ValueError(f"unknown elementwise op {op!r}")


def sigmoid(x) -> np.ndarray:
    """Logistic function, kept strictly inside (0, 1) at float32 precision."""
    x = np.asarray(x, dtype=_dtype(x))
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    if x.dtype == DTYPE:
        y = np.clip(y, _SIGMOID_LO, _SIGMOID_HI)
    return y


def relu(x) -> np.ndarray:
    x = np.asarray(x, dtype=_dtype(x))
    return np.maximum(x, x.dtype.type(0.0))


def activation(op: str, x) -> np.ndarray:
    if op == "sigmoid":
        return sigmoid(x)
    if op == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {op!r}")


def concat_channels(a, b) -> np.ndarray:
    a = as_tensor(a, "concat input")
    b = as_tensor(b, "concat input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate shapes {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)
