"""Progressive cross attention: self gates, crossed gates and additive fusion.

Every gate is ``sigmoid(conv3x3(features))`` with a channel-preserving
kernel, so masks are full (C, h, w) maps multiplied elementwise onto the
features they modulate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tape
from .errors import ShapeError
from .tensor import DTYPE, ConvKernel, as_tensor

_FORWARD = Tape(record=False)

KERNEL_NAMES = ("w_self_r", "w_self_n", "w_cross_r_to_n", "w_cross_n_to_r")


@dataclass
class ProCABlockParams:
    w_self_r: ConvKernel
    w_self_n: ConvKernel
    w_cross_r_to_n: ConvKernel
    w_cross_n_to_r: ConvKernel

    def __post_init__(self):
        for name in KERNEL_NAMES:
            k = getattr(self, name)
            if k.size != 3 or k.in_ch != k.out_ch:
                raise ShapeError(f"{name} must be a channel-preserving 3x3 kernel, "
                                 f"got weight shape {k.weight.shape}")
        if len({getattr(self, n).in_ch for n in KERNEL_NAMES}) != 1:
            raise ShapeError("all four attention kernels must share one channel count")

    @property
    def channels(self) -> int:
        return self.w_self_r.in_ch

    @classmethod
    def from_params(cls, params, prefix: str) -> "ProCABlockParams":
        """View the four kernels stored under ``prefix.<kernel>.weight/bias``."""
        return cls(*(ConvKernel(params[f"{prefix}.{n}.weight"], params[f"{prefix}.{n}.bias"],
                                name=f"{prefix}.{n}") for n in KERNEL_NAMES))

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, bias: float = 0.0,
               prefix: str = "proca") -> "ProCABlockParams":
        s = np.sqrt(1.0 / (channels * 9))
        kernels = []
        for n in KERNEL_NAMES:
            w = rng.uniform(-s, s, (channels, channels, 3, 3)).astype(DTYPE)
            kernels.append(ConvKernel(w, np.full(channels, bias, DTYPE), name=f"{prefix}.{n}"))
        return cls(*kernels)

    def as_params(self) -> dict:
        out = {}
        for n in KERNEL_NAMES:
            k = getattr(self, n)
            out[f"{k.name}.weight"] = k.weight
            out[f"{k.name}.bias"] = k.bias
        return out


@dataclass
class ProCAOutputs:
    a_r: np.ndarray
    a_n: np.ndarray
    a_r_to_n: np.ndarray
    a_n_to_r: np.ndarray
    x_hat_r: np.ndarray
    x_hat_n: np.ndarray
    x_tilde_r: np.ndarray
    x_tilde_n: np.ndarray
    fused: np.ndarray


def _check_pair(x_r, x_n, params: ProCABlockParams):
    if x_r.shape != x_n.shape:
        raise ShapeError(f"attention streams differ in shape: {x_r.shape} vs {x_n.shape}")
    if x_r.ndim != 4 or x_r.shape[1] != params.channels:
        raise ShapeError(f"attention input shape {x_r.shape} does not match "
                         f"{params.channels}-channel kernels")


def self_attend(x_r, x_n, params: ProCABlockParams, ops: Tape = _FORWARD):
    """Gate each stream by a mask computed from itself.

    Returns ``(x_hat_r, x_hat_n, a_r, a_n)``.
    """
    _check_pair(as_tensor(x_r), as_tensor(x_n), params)
    a_r = ops.sigmoid(ops.conv(x_r, params.w_self_r))
    a_n = ops.sigmoid(ops.conv(x_n, params.w_self_n))
    return ops.mul(x_r, a_r), ops.mul(x_n, a_n), a_r, a_n


def cross_attend(x_hat_r, x_hat_n, params: ProCABlockParams, ops: Tape = _FORWARD):
    """Gate each self-attended stream by a mask computed from the other one.

    The R->N mask is derived from the R stream and applied to N, and vice
    versa. Returns ``(x_tilde_r, x_tilde_n, a_r_to_n, a_n_to_r)``.
    """
    _check_pair(as_tensor(x_hat_r), as_tensor(x_hat_n), params)
    a_r_to_n = ops.sigmoid(ops.conv(x_hat_r, params.w_cross_r_to_n))
    a_n_to_r = ops.sigmoid(ops.conv(x_hat_n, params.w_cross_n_to_r))
    return ops.mul(x_hat_r, a_n_to_r), ops.mul(x_hat_n, a_r_to_n), a_r_to_n, a_n_to_r


def fuse(x_tilde_r, x_tilde_n, ops: Tape = _FORWARD):
    return ops.add(x_tilde_r, x_tilde_n)


def proca_block(x_r, x_n, params: ProCABlockParams, ops: Tape = _FORWARD) -> ProCAOutputs:
    x_hat_r, x_hat_n, a_r, a_n = self_attend(x_r, x_n, params, ops)
    x_tilde_r, x_tilde_n, a_r_to_n, a_n_to_r = cross_attend(x_hat_r, x_hat_n, params, ops)
    fused = fuse(x_tilde_r, x_tilde_n, ops)
    return ProCAOutputs(a_r, a_n, a_r_to_n, a_n_to_r, x_hat_r, x_hat_n,
                        x_tilde_r, x_tilde_n, fused)
