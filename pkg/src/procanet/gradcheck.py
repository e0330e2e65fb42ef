"""Finite-difference suites for single layers, the ProCA block and the whole network."""
from __future__ import annotations

import numpy as np

from .attention import ProCABlockParams, proca_block
from .autograd import GradCheckReport, Tape, finite_difference_check
from .losses import combined_loss
from .model import ModelConfig, forward, init_params, loss_and_grads
from .tensor import ConvKernel

LAYER_H = 1e-3
LAYER_TOL = 1e-3
BLOCK_H = 1e-3
NETWORK_H = 1e-2
NETWORK_TOL = 1e-2
NETWORK_SAMPLES = 200


def _layer_inputs(kind, shapes, rng, dtype):
    xs = [rng.uniform(-2, 2, s) for s in shapes]
    if kind == "relu":
        # keep every input well clear of the kink at 0
        xs = [np.sign(x) * (0.25 + np.abs(x)) for x in xs]
    if kind == "maxpool":
        # distinct values 0.05 apart so no perturbation changes a window's winner
        x = xs[0]
        xs = [rng.permutation(x.size).reshape(x.shape) * 0.05 - 0.025 * x.size]
    return [x.astype(dtype) for x in xs]


def check_layer(kind: str, shapes, kernel: ConvKernel | None = None, seed: int = 0,
                h: float = LAYER_H, tol: float = LAYER_TOL, dtype=np.float64) -> GradCheckReport:
    """Check one layer's backward for every input and parameter entry.

    The scalar objective is ``sum(c * layer(inputs))`` for a fixed random
    ``c``, so the backward is exercised with a generic upstream gradient.
    """
    rng = np.random.default_rng(seed)
    xs = _layer_inputs(kind, shapes, rng, dtype)
    params = {f"x{i}": x for i, x in enumerate(xs)}
    if kernel is not None:
        params["k.weight"] = kernel.weight.astype(dtype)
        params["k.bias"] = kernel.bias.astype(dtype)

    def run(prm):
        k = None
        if kernel is not None:
            k = ConvKernel(prm["k.weight"], prm["k.bias"], kernel.padding, name="k")
        tape = Tape()
        ins = [tape.watch(prm[f"x{i}"]) for i in range(len(xs))]
        return tape, ins, tape._apply(kind, tuple(ins), k)

    tape, ins, y = run(params)
    c = rng.standard_normal(y.shape)
    grads = tape.backward(y, c.astype(y.dtype))
    grads.update({f"x{i}": tape.input_grad(x) for i, x in enumerate(ins)})
    return finite_difference_check(lambda prm: float(np.sum(run(prm)[2] * c)),
                                   params, grads, h=h, tol=tol)


def check_proca_block(channels: int = 3, size: int = 6, seed: int = 0, h: float = BLOCK_H,
                      tol: float = LAYER_TOL, dtype=np.float64) -> GradCheckReport:
    """Isolated attention block: gradients for both streams and all four kernels."""
    rng = np.random.default_rng(seed)
    block = ProCABlockParams.random(channels, rng, prefix="p")
    params = {k: v.astype(dtype) for k, v in block.as_params().items()}
    params["x_r"] = rng.uniform(-2, 2, (2, channels, size, size)).astype(dtype)
    params["x_n"] = rng.uniform(-2, 2, (2, channels, size, size)).astype(dtype)
    for k in list(params):
        if k.endswith(".bias"):
            params[k] = rng.uniform(-0.5, 0.5, params[k].shape).astype(dtype)

    def run(prm):
        tape = Tape()
        xr, xn = tape.watch(prm["x_r"]), tape.watch(prm["x_n"])
        out = proca_block(xr, xn, ProCABlockParams.from_params(prm, "p"), tape)
        return tape, xr, xn, out

    tape, xr, xn, out = run(params)
    c = rng.standard_normal(out.fused.shape)
    grads = tape.backward(out.fused, c.astype(out.fused.dtype))
    grads["x_r"], grads["x_n"] = tape.input_grad(xr), tape.input_grad(xn)
    return finite_difference_check(lambda prm: float(np.sum(run(prm)[3].fused * c)),
                                   params, grads, h=h, tol=tol)


def layer_suite(seed: int = 0, dtype=np.float64) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng([seed, 1])
    k3 = ConvKernel(rng.uniform(-0.5, 0.5, (5, 3, 3, 3)), rng.uniform(-0.5, 0.5, 5))
    k1 = ConvKernel(rng.uniform(-0.5, 0.5, (5, 3, 1, 1)), rng.uniform(-0.5, 0.5, 5))
    four = (2, 3, 4, 4)
    return {
        "conv3x3": check_layer("conv", [(2, 3, 6, 6)], k3, seed, dtype=dtype),
        "conv1x1": check_layer("conv", [(2, 3, 6, 6)], k1, seed, dtype=dtype),
        "relu": check_layer("relu", [four], seed=seed, dtype=dtype),
        "sigmoid": check_layer("sigmoid", [four], seed=seed, dtype=dtype),
        "maxpool": check_layer("maxpool", [four], seed=seed, dtype=dtype),
        "upsample": check_layer("upsample", [four], seed=seed, dtype=dtype),
        "mul": check_layer("mul", [four, four], seed=seed, dtype=dtype),
        "add": check_layer("add", [four, four], seed=seed, dtype=dtype),
        "concat": check_layer("concat", [four, (2, 2, 4, 4)], seed=seed, dtype=dtype),
        "proca_block": check_proca_block(seed=seed, dtype=dtype),
    }


TINY_CONFIG = dict(levels=2, base_channels=4)


def network_check(seed: int = 0, h: float = NETWORK_H, tol: float = NETWORK_TOL,
                  n_samples: int = NETWORK_SAMPLES, attention: bool = True,
                  dtype=np.float32, size: int = 16) -> GradCheckReport:
    """Whole-network check of the combined loss at the initial parameters.

    Tiny config (base 4, two levels), one 4-band + 1-band input pair of
    ``size`` x ``size`` pixels with a random binary target.
    """
    config = ModelConfig(**TINY_CONFIG, seed=seed, attention_enabled=attention)
    rng = np.random.default_rng([seed, 2])
    x1 = rng.uniform(0, 1, (1, 4, size, size)).astype(dtype)
    x2 = rng.uniform(0, 1, (1, 1, size, size)).astype(dtype)
    y = (rng.uniform(size=(1, 1, size, size)) > 0.5).astype(dtype)
    params = {k: v.astype(dtype) for k, v in init_params(config).items()}
    _, grads = loss_and_grads(params, config, x1, x2, y)
    return finite_difference_check(lambda prm: combined_loss(forward(prm, config, x1, x2), y),
                                   params, grads, h=h, tol=tol, n_samples=n_samples, seed=seed)
