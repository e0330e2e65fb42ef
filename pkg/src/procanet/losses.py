"""Dice and logit-space binary cross-entropy losses, and segmentation metrics.

Losses reduce in float64 and return Python floats; gradients come back as
float32 tensors shaped like the logits. An optional ``valid`` mask drops
nodata pixels from every sum and from the element count.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError
from .tensor import DTYPE

EPSILON = 1e-7


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"dice epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class LossTerms:
    bce: float
    dice: float

    @property
    def total(self) -> float:
        return self.bce + self.dice


def _prepare(pred, y_true, valid):
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {y.shape}")
    if valid is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(valid, dtype=bool)
        if mask.shape != pred.shape:
            raise ShapeError(f"valid mask shape {mask.shape} does not match {pred.shape}")
    yv = y[mask]
    if not np.all((yv == 0) | (yv == 1)):
        raise ValueError("targets must be 0 or 1 at every valid pixel")
    return pred, np.where(mask, y, 0.0), mask


def _dice(p, y, mask, eps):
    pm = np.where(mask, p, 0.0)
    inter = float(np.sum(y * pm))
    denom = float(np.sum(y)) + float(np.sum(pm)) + eps
    value = 1.0 - (2.0 * inter + eps) / denom
    grad = -(2.0 * y * denom - (2.0 * inter + eps)) / denom**2
    return value, np.where(mask, grad, 0.0)


def dice_loss(y_pred_prob, y_true, eps: float = EPSILON, valid=None) -> float:
    """One global dice loss over every (valid) element of the batch."""
    LossConfig(eps)
    p, y, mask = _prepare(y_pred_prob, y_true, valid)
    return _dice(p, y, mask, eps)[0]


def _bce(z, y, mask):
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(z)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = float(np.sum(np.where(mask, per, 0.0))) / n
    grad = np.where(mask, (expit(z) - y) / n, 0.0)
    return value, grad


def bce_with_logits(logits, y_true, valid=None) -> float:
    """Mean binary cross-entropy evaluated in the overflow-free logit form."""
    z, y, mask = _prepare(logits, y_true, valid)
    return _bce(z, y, mask)[0]


def combined_loss_and_grad(logits, y_true, eps: float = EPSILON, valid=None):
    """``(LossTerms, d total / d logits)`` for BCE-with-logits plus dice."""
    LossConfig(eps)
    z, y, mask = _prepare(logits, y_true, valid)
    bce, g_bce = _bce(z, y, mask)
    p = expit(z)
    dice, g_dice_p = _dice(p, y, mask, eps)
    grad = g_bce + g_dice_p * p * (1.0 - p)
    out_dtype = np.float64 if np.asarray(logits).dtype == np.float64 else DTYPE
    return LossTerms(bce, dice), grad.astype(out_dtype)


def combined_loss(logits, y_true, eps: float = EPSILON, valid=None) -> float:
    return combined_loss_and_grad(logits, y_true, eps, valid)[0].total


# -- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def intersection_sum(self) -> int:
        return self.tp

    @property
    def union_sum(self) -> int:
        return self.tp + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def predict_mask(logits) -> np.ndarray:
    """Binary decision at sigmoid 0.5, i.e. positive logits."""
    return np.asarray(logits) > 0


def confusion_counts(pred_mask, true_mask, valid_mask=None) -> ConfusionCounts:
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction mask shape {pred.shape} does not match {true.shape}")
    valid = np.ones(pred.shape, bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if valid.shape != pred.shape:
        raise ShapeError(f"valid mask shape {valid.shape} does not match {pred.shape}")
    p = (pred == 1) & valid
    t = (true == 1) & valid
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t & valid))
    tn = int(np.count_nonzero(valid)) - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def metrics(counts: ConfusionCounts) -> Metrics:
    """Accuracy, F1 and dataset-aggregated IoU; any 0/0 ratio is 0."""
    if counts.total <= 0:
        raise ValueError("cannot compute metrics from empty counts")
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return Metrics(
        accuracy=(counts.tp + counts.tn) / counts.total,
        precision=precision,
        recall=recall,
        f1=_ratio(2 * precision * recall, precision + recall),
        iou=_ratio(counts.intersection_sum, counts.union_sum),
    )


def metrics_report(counts: ConfusionCounts) -> dict:
    m = metrics(counts)
    return {"accuracy": m.accuracy, "f1": m.f1, "iou": m.iou, **asdict(counts)}


def metrics_json(counts: ConfusionCounts) -> str:
    return json.dumps(metrics_report(counts))
