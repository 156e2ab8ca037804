"""Binary cross-entropy and confusion-count metrics (F1, IoU, precision, recall)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError, PreconditionError

REPORT_KEYS = ("f1", "iou", "precision", "recall", "tp", "fp", "fn", "tn", "degenerate")

REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        **{k: {"type": "number", "minimum": 0, "maximum": 1} for k in ("f1", "iou", "precision", "recall")},
        **{k: {"type": "integer", "minimum": 0} for k in ("tp", "fp", "fn", "tn")},
        "degenerate": {"type": "boolean"},
    },
    "required": list(REPORT_KEYS),
}


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy over all pixels, with probabilities clamped to [eps, 1-eps]."""
    if eps <= 0:
        raise InputError("eps must be positive")
    if pred.shape != target.shape:
        raise PreconditionError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    if not ((target == 0) | (target == 1)).all():
        raise InputError("target must be binary")
    target = target.to(pred.dtype)
    p = pred.clamp(eps, 1 - eps)
    q = (1 - pred).clamp(eps, 1 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(q)).mean()


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_bool(mask, name):
    arr = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise InputError(f"{name} must be binary")
    return arr.astype(bool)


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _as_bool(pred_mask, "pred_mask")
    gt = _as_bool(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise PreconditionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


@dataclass(frozen=True)
class Metrics:
    f1: float
    iou: float
    precision: float
    recall: float
    degenerate: bool

    def as_dict(self) -> dict:
        return {"f1": self.f1, "iou": self.iou, "precision": self.precision, "recall": self.recall}


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def metrics_from_counts(c: ConfusionCounts) -> Metrics:
    """Zero denominators yield 0 for that metric and set ``degenerate``."""
    f1, d1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    iou, d2 = _ratio(c.tp, c.tp + c.fp + c.fn)
    precision, d3 = _ratio(c.tp, c.tp + c.fp)
    recall, d4 = _ratio(c.tp, c.tp + c.fn)
    return Metrics(f1, iou, precision, recall, d1 or d2 or d3 or d4)


def metrics_report(c: ConfusionCounts) -> dict:
    m = metrics_from_counts(c)
    return {
        "f1": m.f1,
        "iou": m.iou,
        "precision": m.precision,
        "recall": m.recall,
        "tp": c.tp,
        "fp": c.fp,
        "fn": c.fn,
        "tn": c.tn,
        "degenerate": m.degenerate,
    }


def write_report(c: ConfusionCounts, path) -> dict:
    report = metrics_report(c)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    return report
