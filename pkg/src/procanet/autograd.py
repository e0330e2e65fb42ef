"""Reverse-mode differentiation by pairing every forward layer with its backward.

The network is a static feed-forward composition, so instead of a general
graph engine a :class:`Tape` records each layer application together with
the context its backward needs, then replays the backwards in reverse order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import _kernels
from .errors import ShapeError
from .tensor import (
    ConvKernel,
    as_tensor,
    concat_channels,
    conv2d_fast,
    conv2d_lowered,
    elementwise,
    maxpool2x2,
    relu,
    sigmoid,
    upsample_nearest2x,
)


@dataclass
class LayerContext:
    """What a layer's backward needs from its forward call."""

    kind: str
    out_shape: tuple
    saved: dict = field(default_factory=dict)


# -- forward halves -----------------------------------------------------------

def conv_forward(x, kernel: ConvKernel):
    y, cols = conv2d_lowered(x, kernel)
    return y, LayerContext("conv", y.shape, {"x": as_tensor(x), "kernel": kernel, "cols": cols})


def relu_forward(x):
    x = as_tensor(x)
    y = relu(x)
    return y, LayerContext("relu", y.shape, {"mask": x > 0})


def sigmoid_forward(x):
    y = sigmoid(as_tensor(x))
    return y, LayerContext("sigmoid", y.shape, {"y": y})


def maxpool_forward(x):
    x = as_tensor(x)
    y, index = maxpool2x2(x)
    return y, LayerContext("maxpool", y.shape, {"index": index, "in_shape": x.shape})


def upsample_forward(x):
    y = upsample_nearest2x(x)
    return y, LayerContext("upsample", y.shape)


def mul_forward(a, b):
    y = elementwise("mul", a, b)
    return y, LayerContext("mul", y.shape, {"a": as_tensor(a), "b": as_tensor(b)})


def add_forward(a, b):
    y = elementwise("add", a, b)
    return y, LayerContext("add", y.shape)


def concat_forward(a, b):
    y = concat_channels(a, b)
    return y, LayerContext("concat", y.shape, {"split": as_tensor(a).shape[1]})


# -- backward halves ----------------------------------------------------------

def conv_backward(ctx, dy, need_input=True):
    x, kernel = ctx.saved["x"], ctx.saved["kernel"]
    n, co, h, w = dy.shape
    # Weight gradient as (patches) @ (upstream, pixel-major): the reduction
    # over batch and pixels runs in ascending order for every weight.
    cols = ctx.saved.get("cols")
    if cols is None:
        cols = _kernels.im2col(x, kernel.size, kernel.padding)
    dy_pix = np.ascontiguousarray(dy.transpose(0, 2, 3, 1).reshape(n * h * w, co))
    dw = _kernels.gemm(cols, dy_pix).T.reshape(kernel.weight.shape)
    db = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype)
    dx = conv2d_fast(dy, kernel.flipped()) if need_input else None
    return (dx,), {"weight": np.ascontiguousarray(dw), "bias": db}


def relu_backward(ctx, dy, need_input=True):
    return (np.where(ctx.saved["mask"], dy, dy.dtype.type(0.0)),), {}


def sigmoid_backward(ctx, dy, need_input=True):
    y = ctx.saved["y"]
    return (dy * y * (1.0 - y),), {}


def maxpool_backward(ctx, dy, need_input=True):
    n, c, h, w = ctx.saved["in_shape"]
    index = ctx.saved["index"].astype(np.intp)
    windows = np.zeros((n, c, h // 2, w // 2, 4), dy.dtype)
    np.put_along_axis(windows, index[..., None], dy[..., None], axis=-1)
    dx = windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return (np.ascontiguousarray(dx.reshape(n, c, h, w)),), {}


def upsample_backward(ctx, dy, need_input=True):
    n, c, h, w = dy.shape
    dx = dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
    return (dx,), {}


def mul_backward(ctx, dy, need_input=True):
    return (dy * ctx.saved["b"], dy * ctx.saved["a"]), {}


def add_backward(ctx, dy, need_input=True):
    return (dy, dy), {}


def concat_backward(ctx, dy, need_input=True):
    k = ctx.saved["split"]
    return (np.ascontiguousarray(dy[:, :k]), np.ascontiguousarray(dy[:, k:])), {}


FORWARD = {
    "conv": conv_forward,
    "relu": relu_forward,
    "sigmoid": sigmoid_forward,
    "maxpool": maxpool_forward,
    "upsample": upsample_forward,
    "mul": mul_forward,
    "add": add_forward,
    "concat": concat_forward,
}

BACKWARD = {
    "conv": conv_backward,
    "relu": relu_backward,
    "sigmoid": sigmoid_backward,
    "maxpool": maxpool_backward,
    "upsample": upsample_backward,
    "mul": mul_backward,
    "add": add_backward,
    "concat": concat_backward,
}


def layer_backward(kind: str, ctx: LayerContext | None, upstream, need_input=True):
    """Gradients of one layer: ``(input grads tuple, {param: grad})``.

    ``need_input=False`` lets a convolution skip its input gradient.
    """
    if ctx is None:
        raise RuntimeError(f"{kind} backward called without a forward context")
    if ctx.kind != kind:
        raise RuntimeError(f"{kind} backward given a {ctx.kind} context")
    upstream = as_tensor(upstream, f"{kind} upstream gradient")
    if upstream.shape != ctx.out_shape:
        raise ShapeError(
            f"{kind} upstream gradient shape {upstream.shape} does not match "
            f"forward output shape {ctx.out_shape}")
    return BACKWARD[kind](ctx, upstream, need_input)


# -- tape ---------------------------------------------------------------------

@dataclass
class _Record:
    kind: str
    ctx: LayerContext
    inputs: tuple
    output: int
    kernel: ConvKernel | None
    refs: tuple  # pins the inputs so their ids stay unique while recorded


class Tape:
    """Runs layers forward and, when recording, replays their backwards.

    With ``record=False`` the tape is a plain forward evaluator; the model
    code is written once against this interface.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._records: list[_Record] = []
        self._values: dict[int, np.ndarray] = {}
        self._input_grads: dict[int, np.ndarray] = {}
        self._watched: set[int] = set()

    def watch(self, x) -> np.ndarray:
        """Track ``x`` so :meth:`input_grad` can report its gradient."""
        x = as_tensor(x)
        self._values[id(x)] = x
        self._watched.add(id(x))
        return x

    def _apply(self, kind, inputs, kernel=None):
        if kernel is not None:
            y, ctx = FORWARD[kind](*inputs, kernel)
        else:
            y, ctx = FORWARD[kind](*inputs)
        if self.record:
            if kernel is not None and not kernel.name:
                raise ValueError("kernels used on a recording tape need a name")
            self._records.append(
                _Record(kind, ctx, tuple(id(a) for a in inputs), id(y), kernel, inputs))
            self._values[id(y)] = y
        return y

    def conv(self, x, kernel: ConvKernel):
        return self._apply("conv", (x,), kernel)

    def relu(self, x):
        return self._apply("relu", (x,))

    def sigmoid(self, x):
        return self._apply("sigmoid", (x,))

    def maxpool(self, x):
        return self._apply("maxpool", (x,))

    def upsample(self, x):
        return self._apply("upsample", (x,))

    def mul(self, a, b):
        return self._apply("mul", (a, b))

    def add(self, a, b):
        return self._apply("add", (a, b))

    def concat(self, a, b):
        return self._apply("concat", (a, b))

    def backward(self, output, upstream, params: Mapping[str, np.ndarray] | None = None):
        """Propagate ``upstream`` (d loss / d output) back through the tape.

        Returns ``{parameter name: gradient}``. When ``params`` is given the
        result holds exactly its keys, in its order, with zeros for
        parameters the output does not depend on. Contexts are released.
        """
        if id(output) not in self._values:
            raise RuntimeError("output was not produced on this tape")
        grads = {id(output): as_tensor(upstream, "upstream gradient")}
        pgrads: dict[str, np.ndarray] = {}
        records, self._records = self._records, []
        while records:
            rec = records.pop()
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            need = rec.inputs[0] in self._values
            in_grads, p_grads = layer_backward(rec.kind, rec.ctx, g, need)
            for key, gi in zip(rec.inputs, in_grads):
                if gi is None or key not in self._values:
                    continue
                grads[key] = grads[key] + gi if key in grads else gi
            for suffix, gp in p_grads.items():
                name = f"{rec.kernel.name}.{suffix}"
                pgrads[name] = pgrads[name] + gp if name in pgrads else gp
        self._input_grads = {k: g for k, g in grads.items() if k in self._watched}
        self._values = {k: v for k, v in self._values.items() if k in self._watched}
        if params is None:
            return pgrads
        unknown = set(pgrads) - set(params)
        if unknown:
            raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
        return {name: pgrads.get(name, np.zeros_like(p)) for name, p in params.items()}

    def input_grad(self, x) -> np.ndarray:
        """Gradient reaching a watched tensor during the last backward."""
        g = self._input_grads.get(id(x))
        return np.zeros_like(x) if g is None else g


# -- finite differences -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    failures: list = field(default_factory=list)
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.n_checked} coordinates, max relative error "
                f"{self.max_rel_error:.3e} (tol {self.tol:.0e})")


def relative_error(a: float, g: float) -> float:
    return abs(a - g) / max(abs(a), abs(g), 1e-6)


def sample_coordinates(params: Mapping[str, np.ndarray], n: int | None, seed: int = 0):
    """``n`` distinct (name, flat index) pairs drawn uniformly over all entries."""
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    if n is None or n >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=n, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    which = np.searchsorted(offsets, flat, side="right") - 1
    return [(names[w], int(i - offsets[w])) for w, i in zip(which, flat)]


def finite_difference_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-3,
    n_samples: int | None = None,
    seed: int = 0,
    coords=None,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``f``.

    ``params`` are perturbed in place and restored. The divisor is the
    actual distance between the two perturbed values after rounding to the
    parameter dtype, not ``2h``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    coords = coords if coords is not None else sample_coordinates(params, n_samples, seed)
    report = GradCheckReport(0.0, 0, tol)
    for name, idx in coords:
        p = params[name]
        flat = p.reshape(-1)
        orig = flat[idx]
        plus = p.dtype.type(orig + h)
        minus = p.dtype.type(orig - h)
        try:
            flat[idx] = plus
            f_plus = float(f(params))
            flat[idx] = minus
            f_minus = float(f(params))
        finally:
            flat[idx] = orig
        report.n_checked += 1
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            report.failures.append((name, idx, "non-finite evaluation"))
            continue
        numeric = (f_plus - f_minus) / (float(plus) - float(minus))
        a = float(analytic[name].reshape(-1)[idx])
        rel = relative_error(a, numeric)
        if report.worst is None or rel > report.max_rel_error:
            report.max_rel_error = rel
            report.worst = (name, idx, a, numeric)
        if rel >= tol:
            report.failures.append((name, idx, a, numeric, rel))
    return report
