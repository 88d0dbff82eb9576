"""Training losses and the IoU evaluation metric."""
from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, add, scale
from .autodiff.ops import record_kink
from .errors import ContractError, InvalidShapeError

CLAMP_EPS = 1e-7
DICE_SMOOTH = 1.0
THRESHOLD = 0.5


def _target_array(pred: Tensor, target) -> np.ndarray:
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if y.shape != pred.shape:
        raise InvalidShapeError(f"prediction {pred.shape} and target {y.shape} differ")
    return y.astype(np.float64)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1-eps]."""
    y = _target_array(pred, target)
    p = pred.data.astype(np.float64)
    inside = (p >= CLAMP_EPS) & (p <= 1 - CLAMP_EPS)
    record_kink(inside)
    pc = np.clip(p, CLAMP_EPS, 1 - CLAMP_EPS)
    n = p.size
    value = -(y * np.log(pc) + (1 - y) * np.log1p(-pc)).sum() / n

    def backward_fn(g):
        grad = np.where(inside, (pc - y) / (pc * (1 - pc)), 0.0) * (g / n)
        return (grad.astype(pred.data.dtype),)

    return Tensor.from_op(np.float64(value), "bce", (pred,), backward_fn)


def dice_loss(pred: Tensor, target) -> Tensor:
    """``1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s)`` over the whole batch."""
    y = _target_array(pred, target)
    p = pred.data.astype(np.float64)
    inter = (p * y).sum()
    denom = p.sum() + y.sum() + DICE_SMOOTH
    numer = 2 * inter + DICE_SMOOTH
    value = 1.0 - numer / denom

    def backward_fn(g):
        grad = -(2 * y * denom - numer) / denom**2 * g
        return (grad.astype(pred.data.dtype),)

    return Tensor.from_op(np.float64(value), "dice", (pred,), backward_fn)


def combined_loss(pred: Tensor, target, dice_weight: float = 0.5) -> Tensor:
    return add(bce_loss(pred, target), scale(dice_loss(pred, target), dice_weight))


LOSSES = {"bce": bce_loss, "dice": dice_loss, "combined": combined_loss}


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold


def iou(pred_mask, truth_mask) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(truth_mask).astype(bool)
    if a.shape != b.shape:
        raise InvalidShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_per_sample(pred_masks, truth_masks) -> list[float]:
    """IoU of each leading-axis sample of two mask stacks."""
    a = np.asarray(pred_masks)
    b = np.asarray(truth_masks)
    if a.shape != b.shape:
        raise InvalidShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return [iou(x, y) for x, y in zip(a, b)]


@dataclass(frozen=True)
class MetricSummary:
    average_iou: float
    min_iou: float
    max_iou: float
    median_iou: float
    n_samples: int


def summarize(ious: Sequence[float]) -> MetricSummary:
    values = [float(v) for v in ious]
    if not values:
        raise ContractError("summarize needs at least one IoU value")
    return MetricSummary(
        average_iou=float(np.mean(values)),
        min_iou=min(values),
        max_iou=max(values),
        median_iou=float(statistics.median(values)),
        n_samples=len(values),
    )


def median_of_runs(summaries: Sequence[MetricSummary]) -> MetricSummary:
    """Field-wise median over repeated runs."""
    if not summaries:
        raise ContractError("median_of_runs needs at least one summary")
    med = {f.name: statistics.median(getattr(s, f.name) for s in summaries) for f in fields(MetricSummary)}
    med["n_samples"] = int(med["n_samples"])
    return MetricSummary(**med)


CSV_COLUMNS = ("run_id", "model", "avg", "min", "median", "max", "n")


def summary_row(run_id: str, model: str, s: MetricSummary) -> dict:
    return {
        "run_id": run_id,
        "model": model,
        "avg": f"{s.average_iou:.6f}",
        "min": f"{s.min_iou:.6f}",
        "median": f"{s.median_iou:.6f}",
        "max": f"{s.max_iou:.6f}",
        "n": s.n_samples,
    }


def write_summary_csv(path: str | Path, rows: Iterable[dict], extra_columns: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[*CSV_COLUMNS, *extra_columns])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


__all__ = [
    "MetricSummary",
    "bce_loss",
    "binarize",
    "combined_loss",
    "dice_loss",
    "iou",
    "iou_per_sample",
    "median_of_runs",
    "summarize",
    "summary_row",
    "write_summary_csv",
]
