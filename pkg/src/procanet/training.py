"""Adam, cosine annealing with warm restarts, patch datasets and the fit loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .archive import check_shapes, read_archive, write_archive
from .data import NODATA, PATCH, TEST_STRIDE, TRAIN_STRIDE, Raster, extract_patches, \
    filter_patch, select_bands
from .errors import ConfigError, NumericError, ShapeError
from .losses import ConfusionCounts, confusion_counts, metrics, predict_mask
from .model import ModelConfig, init_params, loss_and_grads, param_shapes, predict_logits, \
    save_weights

OPTIMIZER_MAGIC = b"PCAO"


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    The inputs are left untouched, so a rejected step costs nothing.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters {missing[:5]}")
    for k in params:
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient for {k}; step rejected")
    t = state.step + 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    c1 = np.float32(1.0 - state.beta1**t)
    c2 = np.float32(1.0 - state.beta2**t)
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        update = np.float32(lr) * (m / c1) / (np.sqrt(v / c2) + np.float32(state.eps))
        new_p[k] = (p - update).astype(p.dtype)
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps)


def save_optimizer(state: AdamState, path) -> None:
    arrays = {"step": np.array([state.step], np.float32)}
    arrays.update({f"m/{k}": a for k, a in state.m.items()})
    arrays.update({f"v/{k}": a for k, a in state.v.items()})
    write_archive(path, OPTIMIZER_MAGIC, arrays)


def load_optimizer(path, config: ModelConfig | None = None) -> AdamState:
    arrays = read_archive(path, OPTIMIZER_MAGIC)
    step = arrays.pop("step", None)
    if step is None or step.shape != (1,):
        raise ShapeError(f"{path}: optimizer state has no scalar step entry")
    m = {k[2:]: a for k, a in arrays.items() if k.startswith("m/")}
    v = {k[2:]: a for k, a in arrays.items() if k.startswith("v/")}
    if config is not None:
        check_shapes(m, param_shapes(config), "first-moment")
        check_shapes(v, param_shapes(config), "second-moment")
    return AdamState(m, v, int(step[0]))


# -- learning-rate schedule ---------------------------------------------------

@dataclass(frozen=True)
class SchedulerConfig:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    t0: int = 1
    t_mult: int = 2
    restarts: int = 10

    def __post_init__(self):
        if self.t0 < 1:
            raise ConfigError(f"t0 must be >= 1, got {self.t0}")
        if self.t_mult < 1 or self.restarts < 1:
            raise ConfigError("t_mult and restarts must be >= 1")
        if self.lr_min < 0 or self.lr_max < self.lr_min:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")

    def period_lengths(self) -> list[int]:
        return [self.t0 * self.t_mult**i for i in range(self.restarts)]

    def period_starts(self) -> list[int]:
        starts, s = [], 0
        for length in self.period_lengths():
            starts.append(s)
            s += length
        return starts

    @property
    def total_steps(self) -> int:
        return sum(self.period_lengths())

    @classmethod
    def spanning(cls, total_steps: int, **kw) -> "SchedulerConfig":
        """Choose t0 so that all doubling periods fit into ``total_steps``."""
        restarts = kw.get("restarts", 10)
        t_mult = kw.get("t_mult", 2)
        span = sum(t_mult**i for i in range(restarts))
        return cls(t0=max(1, math.ceil(total_steps / span)), **kw)


def lr_at(step: int, config: SchedulerConfig) -> float:
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    start = 0
    for length in config.period_lengths():
        if step < start + length:
            t_cur = step - start
            return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * \
                (1.0 + math.cos(math.pi * t_cur / length))
        start += length
    return config.lr_min


# -- patch datasets -----------------------------------------------------------

@dataclass
class PatchData:
    """Materialized patches: inputs, 0/1 targets and the valid-pixel mask."""
    x1: np.ndarray
    x2: np.ndarray | None
    y: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return self.x1.shape[0]

    def take(self, idx) -> "PatchData":
        return PatchData(self.x1[idx], None if self.x2 is None else self.x2[idx],
                         self.y[idx], self.valid[idx])


def build_patches(scenes: Sequence[tuple[Raster, Raster]], config: ModelConfig,
                  stride: int = TRAIN_STRIDE, apply_filter: bool = True,
                  scale: float = 1.0, patch: int = PATCH) -> PatchData:
    x1s, x2s, ys = [], [], []
    for image, label in scenes:
        if (image.height, image.width) != (label.height, label.width):
            raise ShapeError(f"image {image.data.shape} and label {label.data.shape} differ")
        a = select_bands(image, config.encoder1_bands, scale)
        b = select_bands(image, config.encoder2_bands, scale) if config.dual else None
        lab = label.data[0]
        for _, r, c in extract_patches(image.height, image.width, patch, stride):
            win = (slice(r, r + patch), slice(c, c + patch))
            lp = lab[win]
            if apply_filter and not filter_patch(lp):
                continue
            x1s.append(a[(slice(None),) + win])
            if b is not None:
                x2s.append(b[(slice(None),) + win])
            ys.append(lp)
    if not ys:
        raise ValueError("no patches survived extraction and filtering")
    y = np.stack(ys)[:, None]
    valid = y != NODATA
    return PatchData(np.stack(x1s), np.stack(x2s) if x2s else None,
                     np.where(valid, y, 0).astype(np.float32), valid)


def split_scenes(count: int, train_fraction: float = 0.65, seed: int = 0):
    """Shuffled scene indices split into (train, validation)."""
    if count < 2:
        raise ValueError("need at least two scenes to split")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5C])).permutation(count)
    n_train = min(max(1, int(round(count * train_fraction))), count - 1)
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def evaluate(params, config: ModelConfig, data: PatchData, batch_size: int = 8) -> ConfusionCounts:
    logits = predict_logits(params, config, data.x1, data.x2, batch_size)
    return confusion_counts(predict_mask(logits), data.y == 1, data.valid)


# -- fit ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 8
    lr_max: float = 1e-4
    lr_min: float = 0.0
    restarts: int = 10
    t_mult: int = 2
    seed: int = 0
    max_steps: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs, batch_size and eval_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    params: dict
    state: AdamState
    best_params: dict
    best_val_iou: float
    best_epoch: int
    log: list = field(default_factory=list)
    steps: int = 0


def _steps_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def fit(model_config: ModelConfig, train_config: TrainConfig, train: PatchData, val: PatchData,
        out_dir=None, params: dict | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train with Adam and the restart schedule; keep the best-validation-IoU weights.

    With ``out_dir`` the per-epoch log goes to ``train_log.jsonl`` and the best
    checkpoint to ``best.pcaw`` / ``best.pcao``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fit needs non-empty training and validation patches")
    tc = train_config
    per_epoch = _steps_per_epoch(len(train), tc.batch_size)
    total = per_epoch * tc.epochs
    if tc.max_steps is not None:
        total = min(total, tc.max_steps)
    sched = SchedulerConfig.spanning(total, lr_max=tc.lr_max, lr_min=tc.lr_min,
                                     t_mult=tc.t_mult, restarts=tc.restarts)
    params = init_params(model_config) if params is None else dict(params)
    state = AdamState.create(params)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    result = FitResult(params, state, params, -1.0, -1)
    step = 0
    try:
        for epoch in range(tc.epochs):
            order = np.random.default_rng([tc.seed, epoch]).permutation(len(train))
            losses, lr = [], lr_at(step, sched)
            for b in range(per_epoch):
                if step >= total:
                    break
                batch = train.take(order[b * tc.batch_size:(b + 1) * tc.batch_size])
                terms, grads = loss_and_grads(params, model_config, batch.x1, batch.x2,
                                              batch.y, batch.valid)
                if not (math.isfinite(terms.bce) and math.isfinite(terms.dice)):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}: "
                                       f"bce={terms.bce}, dice={terms.dice}")
                lr = lr_at(step, sched)
                params, state = adam_step(params, grads, state, lr)
                losses.append(terms.total)
                step += 1
            last = step >= total or epoch == tc.epochs - 1
            record = {"epoch": epoch, "lr": lr,
                      "train_loss": float(np.mean(losses)) if losses else None,
                      "val_iou": None, "val_f1": None, "val_acc": None}
            if (epoch + 1) % tc.eval_every == 0 or last:
                m = metrics(evaluate(params, model_config, val))
                record.update(val_iou=m.iou, val_f1=m.f1, val_acc=m.accuracy)
                if m.iou > result.best_val_iou:
                    result.best_val_iou, result.best_epoch = m.iou, epoch
                    result.best_params = params
                    if out is not None:
                        save_weights(params, out / "best.pcaw")
                        save_optimizer(state, out / "best.pcao")
            result.log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
            if last:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    result.params, result.state, result.steps = params, state, step
    return result
