"""Training losses (Huber + edge persistence) and depth-completion metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DELTA_THRESHOLDS = (1.10, 1.25, 1.25**2, 1.25**3)
_DELTA_KEYS = ("d110", "d125", "d156", "d195")


@dataclass(frozen=True)
class LossWeights:
    lambda_delta: float = 0.7
    lambda_p: float = 0.3
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.lambda_delta < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_delta + self.lambda_p <= 0:
            raise ValueError("at least one loss weight must be positive")


def _tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check(pred, gt, name):
    if pred.shape != gt.shape:
        raise ShapeError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")


def huber_loss(pred, gt, delta=1.0):
    """Sum over pixels of huber(pred - gt)."""
    pred = _tensor(pred)
    gt = _tensor(gt, pred)
    _check(pred, gt, "huber_loss")
    return T.sum_all(T.huber_elem(pred, gt, delta))


def edge_loss(pred, gt):
    """Sum of L1 differences between forward-difference gradients.

    Vertical differences run along rows (axis -2), horizontal along columns
    (axis -1); each is one shorter than the image along its axis.
    """
    pred = _tensor(pred)
    gt = _tensor(gt, pred)
    _check(pred, gt, "edge_loss")
    if pred.shape[-1] < 2 or pred.shape[-2] < 2:
        raise ShapeError(f"edge_loss needs H, W >= 2, got {pred.shape}")
    gt_v = Tensor(np.diff(gt.data, axis=-2))
    gt_h = Tensor(np.diff(gt.data, axis=-1))
    vert = T.sum_all(T.abs_diff(T.diff(pred, -2), gt_v))
    horiz = T.sum_all(T.abs_diff(T.diff(pred, -1), gt_h))
    return T.add(vert, horiz)


def total_loss(pred, gt, weights=LossWeights()):
    """Weighted Huber + edge loss, each divided by the pixel count."""
    pred = _tensor(pred)
    gt = _tensor(gt, pred)
    _check(pred, gt, "total_loss")
    n = pred.size
    terms = []
    if weights.lambda_delta:
        terms.append(T.scale(huber_loss(pred, gt, weights.huber_delta), weights.lambda_delta / n))
    if weights.lambda_p:
        terms.append(T.scale(edge_loss(pred, gt), weights.lambda_p / n))
    return terms[0] if len(terms) == 1 else T.add(*terms)


class NoValidPixelsError(ValueError):
    pass


@dataclass
class MetricReport:
    rmse: float
    rel: float
    delta: dict = field(default_factory=dict)  # threshold -> percentage

    def to_line(self):
        parts = [f"rmse={self.rmse:.6f}", f"rel={self.rel:.6f}"]
        for key, t in zip(_DELTA_KEYS, DELTA_THRESHOLDS):
            parts.append(f"{key}={self.delta[t]:.4f}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line):
        kv = dict(item.split("=", 1) for item in line.split())
        delta = {t: float(kv[key]) for key, t in zip(_DELTA_KEYS, DELTA_THRESHOLDS)}
        return cls(float(kv["rmse"]), float(kv["rel"]), delta)


def evaluate(pred, gt, eval_mask=None):
    """RMSE, mean relative error and delta-threshold accuracies over masked pixels.

    The mask defaults to gt > 0 and is always intersected with it.
    """
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"evaluate: prediction {pred.shape} vs ground truth {gt.shape}")
    mask = gt > 0
    if eval_mask is not None:
        mask &= np.asarray(eval_mask, dtype=bool)
    if not mask.any():
        raise NoValidPixelsError("no valid pixels to evaluate")
    p, g = pred[mask], gt[mask]
    err = p - g
    rmse = float(np.sqrt(np.mean(err * err)))
    rel = float(np.mean(np.abs(err) / g))
    with np.errstate(divide="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    delta = {t: float(100.0 * np.mean(ratio < t)) for t in DELTA_THRESHOLDS}
    return MetricReport(rmse, rel, delta)
