"""Training losses and the sensitivity / specificity / accuracy metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from supunet.tensor import ShapeError


class ValidationError(ValueError):
    """Raised for out-of-range labels or non-binary masks."""


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its gradient ``sign(pred - target) / count``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    count = diff.size
    return float(np.abs(diff).sum() / count), np.sign(diff) / count


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(n, h, w) integer labels -> (n, C, h, w) float one-hot."""
    _check_labels(labels, num_classes)
    classes = np.arange(num_classes)[None, :, None, None]
    return (labels[:, None, :, :] == classes).astype(np.float64)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]"
        )


def pixelwise_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy over the channel axis, averaged over pixels.

    ``logits`` is (n, C, h, w) and ``labels`` is (n, h, w). Returns the loss
    and its gradient ``(softmax - onehot) / pixel_count``.
    """
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    labels = np.asarray(labels)
    _check_labels(labels, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    target = one_hot(labels, c)
    pixels = n * h * w
    loss = float(-(log_p * target).sum() / pixels)
    return loss, (np.exp(log_p) - target) / pixels


@dataclass(frozen=True)
class ConfusionCounts:
    n_tp: int = 0
    n_tn: int = 0
    n_fp: int = 0
    n_fn: int = 0

    @property
    def n_p(self) -> int:
        return self.n_tp + self.n_fn

    @property
    def n_n(self) -> int:
        return self.n_tn + self.n_fp

    @property
    def total(self) -> int:
        return self.n_tp + self.n_tn + self.n_fp + self.n_fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.n_tp + other.n_tp,
            self.n_tn + other.n_tn,
            self.n_fp + other.n_fp,
            self.n_fn + other.n_fn,
        )

    def as_dict(self) -> dict:
        return {"n_tp": self.n_tp, "n_tn": self.n_tn, "n_fp": self.n_fp, "n_fn": self.n_fn}


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionCounts:
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"prediction {pred_mask.shape} and ground truth {gt_mask.shape} differ")
    for name, m in (("prediction", pred_mask), ("ground truth", gt_mask)):
        if not np.isin(m, (0, 1)).all():
            raise ValidationError(f"{name} mask must be binary")
    p = pred_mask == 1
    g = gt_mask == 1
    return ConfusionCounts(
        n_tp=int(np.count_nonzero(p & g)),
        n_tn=int(np.count_nonzero(~p & ~g)),
        n_fp=int(np.count_nonzero(p & ~g)),
        n_fn=int(np.count_nonzero(~p & g)),
    )


def confusion_per_class(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> list:
    """One-vs-rest counts for each class scored by :func:`report_metrics`.

    Binary problems score class 1 only; otherwise every class is scored.
    """
    classes = [1] if num_classes == 2 else range(num_classes)
    return [confusion((pred == k).astype(np.int8), (gt == k).astype(np.int8)) for k in classes]


def sensitivity(c: ConfusionCounts) -> float:
    """True-positive rate; NaN when there are no positive pixels."""
    if c.n_p == 0:
        return math.nan
    return c.n_tp / c.n_p


def specificity(c: ConfusionCounts) -> float:
    """True-negative rate; NaN when there are no negative pixels."""
    if c.n_n == 0:
        return math.nan
    return c.n_tn / c.n_n


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValidationError("accuracy is undefined for zero evaluated pixels")
    return (c.n_tp + c.n_tn) / (c.n_tp + c.n_tn + c.n_fn + c.n_fp)


def _macro(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return sum(values) / len(values) if values else math.nan


def report_metrics(per_class: list) -> dict:
    """Macro-average the three metrics over one-vs-rest class counts."""
    return {
        "specificity": _macro(specificity(c) for c in per_class),
        "sensitivity": _macro(sensitivity(c) for c in per_class),
        "accuracy": _macro(accuracy(c) for c in per_class),
    }


def _jsonable(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def to_json(report: dict) -> str:
    """Key-sorted JSON; undefined (NaN) metrics become ``null``."""
    return json.dumps(_jsonable(report), sort_keys=True, indent=2)


def _fmt(value: float) -> str:
    return "undefined" if math.isnan(value) else f"{value:.3f}"


def to_table(rows: dict) -> str:
    """Plain-text table with Specificity, Sensitivity and Accuracy columns.

    ``rows`` maps a row label (e.g. the dataset name) to a metrics dict.
    """
    header = ("Data", "Specificity", "Sensitivity", "Accuracy")
    body = [
        (label, _fmt(m["specificity"]), _fmt(m["sensitivity"]), _fmt(m["accuracy"]))
        for label, m in rows.items()
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    lines = [" | ".join(cell.ljust(wd) for cell, wd in zip(header, widths))]
    lines.append("-+-".join("-" * wd for wd in widths))
    lines += [" | ".join(cell.ljust(wd) for cell, wd in zip(r, widths)) for r in body]
    return "\n".join(line.rstrip() for line in lines)
