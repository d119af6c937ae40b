"""Confusion-matrix segmentation scores and the normalised dataset distance."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .layers import IGNORE_LABEL


@dataclass(frozen=True)
class ReferenceScore:
    acc: float
    miou: float

    def __post_init__(self):
        for v in (self.acc, self.miou):
            if not 0 <= v <= 100:
                raise InputError(f"scores are percentages in [0, 100], got {v}")


# reference (acc, mIoU) the distance command uses when none is given
DEFAULT_REFERENCE = ReferenceScore(acc=79.92, miou=69.22)


@dataclass(frozen=True)
class SegScores:
    mean_class_acc: float
    miou: float
    class_acc: np.ndarray
    class_iou: np.ndarray

    def as_reference(self) -> ReferenceScore:
        return ReferenceScore(self.mean_class_acc, self.miou)

    def cell(self) -> str:
        return format_cell(self.mean_class_acc, self.miou)


def format_cell(acc: float, miou: float) -> str:
    return f"{acc:.2f}-{miou:.2f}"


class ConfusionMatrix:
    """C x C pixel counts, rows are ground truth, columns are predictions."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64).copy()
        if self.counts.shape != (n_classes, n_classes) or (self.counts < 0).any():
            raise InputError("counts must be a non-negative C x C matrix")

    def accumulate(self, pred, truth) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise InputError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
        c = self.n_classes
        if pred.size and (pred.min() < 0 or pred.max() >= c):
            raise InputError(f"predictions must lie in [0, {c})")
        keep = truth != IGNORE_LABEL
        t = truth[keep].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= c):
            raise InputError(f"ground truth must lie in [0, {c}) or be {IGNORE_LABEL}")
        p = pred[keep].astype(np.int64)
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def scores(self) -> SegScores:
        return scores(self)


def scores(cm: ConfusionMatrix) -> SegScores:
    """Mean class accuracy and mIoU (percent) over classes present in ground truth."""
    if cm.total == 0:
        raise InputError("cannot score an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    present = rows > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(present, tp / rows, np.nan)
        iou = np.where(present, tp / (rows + cols - tp), np.nan)
    return SegScores(
        mean_class_acc=100.0 * float(acc[present].mean()),
        miou=100.0 * float(iou[present].mean()),
        class_acc=100.0 * acc,
        class_iou=100.0 * iou,
    )


def dataset_distance(ref: ReferenceScore, on_d2: ReferenceScore) -> float:
    """Normalised (acc, mIoU) degradation between two datasets, in percent."""
    if ref.acc <= 0 or ref.miou <= 0:
        raise InputError("reference scores must be positive")
    return 100.0 * 0.5 * (abs(ref.acc - on_d2.acc) / ref.acc + abs(ref.miou - on_d2.miou) / ref.miou)


def write_scores_csv(path, rows: list[tuple[str, str, SegScores]]) -> None:
    """Rows of (run_id, split, scores) -> CSV with per-class columns."""
    if not rows:
        raise InputError("no score rows to write")
    n = len(rows[0][2].class_acc)
    header = ["run_id", "split", "acc", "miou"] + [f"acc_{i}" for i in range(n)] + [f"iou_{i}" for i in range(n)]
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for run_id, split, s in rows:
            per_class = [_fmt(v) for v in s.class_acc] + [_fmt(v) for v in s.class_iou]
            w.writerow([run_id, split, f"{s.mean_class_acc:.4f}", f"{s.miou:.4f}"] + per_class)


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else f"{v:.4f}"


def read_scores_csv(path) -> list[dict]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
