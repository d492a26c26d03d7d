"""IoU bookkeeping and the balance metrics reported for GFSS."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float | None:
    """IoU of one class, or ``None`` when the class is in neither mask."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p, g = pred == class_id, gt == class_id
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return None
    return np.count_nonzero(p & g) / union


def h_mean(miou_base: float, miou_novel: float) -> float:
    if miou_base < 0 or miou_novel < 0:
        raise DomainError("mIoU values must be non-negative")
    s = miou_base + miou_novel
    return 0.0 if s == 0 else 2.0 * miou_base * miou_novel / s


def miou_all(miou_base: float, miou_novel: float, n_base: int, n_novel: int) -> float:
    if n_base <= 0 or n_novel <= 0:
        raise DomainError("class counts must be positive")
    return (n_base * miou_base + n_novel * miou_novel) / (n_base + n_novel)


class IoUAccumulator:
    """Running per-class intersection and union pixel counts."""

    def __init__(self, class_ids: Sequence[int]):
        self.class_ids = tuple(class_ids)
        self.inter = np.zeros(len(self.class_ids), dtype=np.int64)
        self.union = np.zeros(len(self.class_ids), dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        for k, c in enumerate(self.class_ids):
            p, g = pred == c, gt == c
            self.inter[k] += np.count_nonzero(p & g)
            self.union[k] += np.count_nonzero(p | g)

    def merge(self, other: IoUAccumulator) -> None:
        self.inter += other.inter
        self.union += other.union

    def per_class(self) -> dict[int, float]:
        """IoU of every class with a non-empty union."""
        return {c: self.inter[k] / self.union[k] for k, c in enumerate(self.class_ids) if self.union[k] > 0}


def mean_over(ious: dict[int, float], classes: Iterable[int]) -> float | None:
    vals = [ious[c] for c in classes if c in ious]
    return float(np.mean(vals)) if vals else None
