"""Dual-encoder, single-decoder segmentation network with ProCA skips.

Channel ladder for ``base_channels=b`` and ``levels=L``: encoder level i
(0-based) maps to ``b * 2**i`` channels with two 3x3 conv+ReLU layers and
is followed by a 2x2 max-pool. At every pooled level the two streams meet
in a ProCA block; the attended features continue down their own encoders
and the fused map becomes the decoder skip. The deepest fused map feeds a
bottleneck of ``2 * b * 2**(L-1)`` channels. Each decoder stage upsamples,
applies a 3x3 conv+ReLU, concatenates the matching skip and runs a double
conv; the last stage restores full resolution without a skip. A 1x1 conv
produces one logit per pixel.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .archive import check_shapes, read_archive, write_archive
from .attention import KERNEL_NAMES, ProCABlockParams, proca_block
from .autograd import Tape
from .errors import ConfigError, ShapeError
from .losses import EPSILON, combined_loss_and_grad
from .tensor import DTYPE, ConvKernel, as_tensor

WEIGHTS_MAGIC = b"PCAW"
DEFAULT_BANDS = ("R", "G", "B", "NIR")

_FORWARD = Tape(record=False)


@dataclass
class ModelConfig:
    levels: int = 4
    base_channels: int = 16
    encoder1_bands: tuple = DEFAULT_BANDS
    encoder2_bands: tuple | None = ("NIR",)
    attention_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.levels) < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if int(self.base_channels) < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        self.levels = int(self.levels)
        self.base_channels = int(self.base_channels)
        self.encoder1_bands = tuple(self.encoder1_bands)
        if not self.encoder1_bands:
            raise ConfigError("encoder1 needs at least one band")
        if self.encoder2_bands is not None:
            self.encoder2_bands = tuple(self.encoder2_bands)
            if not self.encoder2_bands:
                raise ConfigError("encoder2 bands must be non-empty or None")
        else:
            # a single encoder is a plain UNet; there is nothing to attend across
            self.attention_enabled = False
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def dual(self) -> bool:
        return self.encoder2_bands is not None

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder1_bands"] = list(self.encoder1_bands)
        d["encoder2_bands"] = None if self.encoder2_bands is None else list(self.encoder2_bands)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


def _conv_shape(shapes, name, cin, cout, k=3):
    shapes[f"{name}.weight"] = (cout, cin, k, k)
    shapes[f"{name}.bias"] = (cout,)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every parameter's shape, in the fixed order used for storage."""
    shapes: dict[str, tuple] = {}
    L = config.levels
    encoders = [("enc1", config.encoder1_bands)]
    if config.dual:
        encoders.append(("enc2", config.encoder2_bands))
    for prefix, bands in encoders:
        cin = len(bands)
        for i in range(L):
            c = config.channels(i)
            _conv_shape(shapes, f"{prefix}.{i}.conv1", cin, c)
            _conv_shape(shapes, f"{prefix}.{i}.conv2", c, c)
            cin = c
    if config.attention_enabled:
        for i in range(L):
            for kname in KERNEL_NAMES:
                _conv_shape(shapes, f"proca.{i}.{kname}", config.channels(i), config.channels(i))
    deep = config.channels(L - 1)
    _conv_shape(shapes, "bottleneck.conv1", deep, 2 * deep)
    _conv_shape(shapes, "bottleneck.conv2", 2 * deep, 2 * deep)
    prev = 2 * deep
    for j, i in enumerate(range(L - 2, -1, -1)):
        c = config.channels(i)
        _conv_shape(shapes, f"dec.{j}.up", prev, c)
        _conv_shape(shapes, f"dec.{j}.conv1", 2 * c, c)
        _conv_shape(shapes, f"dec.{j}.conv2", c, c)
        prev = c
    c = config.channels(0)
    _conv_shape(shapes, "final.up", prev, c)
    _conv_shape(shapes, "final.conv1", c, c)
    _conv_shape(shapes, "final.conv2", c, c)
    _conv_shape(shapes, "head", c, 1, k=1)
    return shapes


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform(-s, s) weights with s = sqrt(1 / fan_in), zero biases."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, DTYPE)
        else:
            s = np.sqrt(1.0 / (shape[1] * shape[2] * shape[3]))
            params[name] = rng.uniform(-s, s, shape).astype(DTYPE)
    return params


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return sum(int(p.size) for p in params.values())


def _kernel(params, name) -> ConvKernel:
    return ConvKernel(params[f"{name}.weight"], params[f"{name}.bias"], name=name)


def _double_conv(ops, params, prefix, x):
    x = ops.relu(ops.conv(x, _kernel(params, f"{prefix}.conv1")))
    return ops.relu(ops.conv(x, _kernel(params, f"{prefix}.conv2")))


def check_inputs(config: ModelConfig, x1, x2=None):
    x1 = as_tensor(x1, "encoder1 input")
    if x1.shape[1] != len(config.encoder1_bands):
        raise ShapeError(f"encoder1 input shape {x1.shape} needs "
                         f"{len(config.encoder1_bands)} channels {config.encoder1_bands}")
    step = 2**config.levels
    if x1.shape[2] % step or x1.shape[3] % step:
        raise ShapeError(f"spatial dims of {x1.shape} must be divisible by {step}")
    if config.dual:
        if x2 is None:
            raise ShapeError("this configuration needs an encoder2 input")
        x2 = as_tensor(x2, "encoder2 input")
        if x2.shape[1] != len(config.encoder2_bands):
            raise ShapeError(f"encoder2 input shape {x2.shape} needs "
                             f"{len(config.encoder2_bands)} channels {config.encoder2_bands}")
        if x2.shape[0] != x1.shape[0] or x2.shape[2:] != x1.shape[2:]:
            raise ShapeError(f"encoder inputs differ: {x1.shape} vs {x2.shape}")
    elif x2 is not None:
        raise ShapeError("single-encoder configuration given an encoder2 input")
    return x1, x2


def forward(params, config: ModelConfig, x1, x2=None, ops: Tape = _FORWARD) -> np.ndarray:
    """Logits of shape (n, 1, h, w); no output activation."""
    x1, x2 = check_inputs(config, x1, x2)
    r, nir = x1, x2
    skips = []
    for i in range(config.levels):
        r = ops.maxpool(_double_conv(ops, params, f"enc1.{i}", r))
        if not config.dual:
            skips.append(r)
            continue
        nir = ops.maxpool(_double_conv(ops, params, f"enc2.{i}", nir))
        if config.attention_enabled:
            out = proca_block(r, nir, ProCABlockParams.from_params(params, f"proca.{i}"), ops)
            r, nir = out.x_tilde_r, out.x_tilde_n
            skips.append(out.fused)
        else:
            skips.append(ops.add(r, nir))
    h = _double_conv(ops, params, "bottleneck", skips[-1])
    for j, i in enumerate(range(config.levels - 2, -1, -1)):
        h = ops.relu(ops.conv(ops.upsample(h), _kernel(params, f"dec.{j}.up")))
        h = _double_conv(ops, params, f"dec.{j}", ops.concat(h, skips[i]))
    h = ops.relu(ops.conv(ops.upsample(h), _kernel(params, "final.up")))
    h = _double_conv(ops, params, "final", h)
    return ops.conv(h, _kernel(params, "head"))


def loss_and_grads(params, config: ModelConfig, x1, x2, y, valid=None, eps: float = EPSILON):
    """Combined loss terms and the gradient of their sum for every parameter."""
    tape = Tape()
    logits = forward(params, config, x1, x2, ops=tape)
    terms, dlogits = combined_loss_and_grad(logits, y, eps, valid)
    return terms, tape.backward(logits, dlogits, params)


def predict_logits(params, config: ModelConfig, x1, x2=None, batch_size: int = 8) -> np.ndarray:
    """Forward pass in chunks; every sample's result is independent of the chunking."""
    x1, x2 = check_inputs(config, x1, x2)
    out = []
    for s in range(0, x1.shape[0], batch_size):
        out.append(forward(params, config, x1[s:s + batch_size],
                           None if x2 is None else x2[s:s + batch_size]))
    return np.concatenate(out, axis=0)


def save_weights(params: Mapping[str, np.ndarray], path) -> None:
    write_archive(path, WEIGHTS_MAGIC, params)


def load_weights(path, config: ModelConfig | None = None) -> dict[str, np.ndarray]:
    """Read a weight file; with ``config``, also verify names and shapes."""
    params = read_archive(path, WEIGHTS_MAGIC)
    if config is not None:
        check_shapes(params, param_shapes(config), "weight")
    return params
