"""Weighted softmax cross-entropy and class-wise IoU on BEV rasters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

BACKGROUND, DRIVABLE, VEHICLE = 0, 1, 2
CLASS_NAMES = ("background", "drivable", "vehicle")


@dataclass(eq=False)
class BevLabels:
    """Per-cell one-hot targets plus an ignore mask."""

    onehot: np.ndarray  # (rows, cols, C) uint8
    ignore: np.ndarray  # (rows, cols) bool

    def __post_init__(self):
        self.onehot = np.asarray(self.onehot, dtype=np.uint8)
        self.ignore = np.asarray(self.ignore, dtype=bool)
        if self.onehot.ndim != 3 or self.ignore.shape != self.onehot.shape[:2]:
            raise DomainError("labels must be (rows, cols, C) with a matching (rows, cols) ignore mask")
        if self.onehot.max(initial=0) > 1:
            raise DomainError("label entries must be 0 or 1")

    @classmethod
    def from_class_ids(cls, ids, num_classes=3, ignore=None) -> BevLabels:
        ids = np.asarray(ids)
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= num_classes:
            raise DomainError(f"class ids must lie in [0, {num_classes})")
        onehot = (ids[..., None] == np.arange(num_classes)).astype(np.uint8)
        if ignore is None:
            ignore = np.zeros(ids.shape, dtype=bool)
        return cls(onehot, ignore)

    @property
    def num_classes(self) -> int:
        return self.onehot.shape[-1]

    def class_ids(self) -> np.ndarray:
        return np.argmax(self.onehot, axis=-1)


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if not w or not all(np.isfinite(x) and x > 0 for x in w):
            raise DomainError(f"class weights must be finite and positive, got {w}")
        object.__setattr__(self, "weights", w)

    def as_array(self) -> np.ndarray:
        return np.array(self.weights)

    @classmethod
    def uniform(cls, num_classes=3) -> ClassWeights:
        return cls((1.0,) * num_classes)

    @classmethod
    def inverse_frequency(cls, labels, clip=(0.1, 10.0)) -> ClassWeights:
        """Balanced inverse frequency N / (C * N_c) over non-ignored cells, clipped."""
        labels = list(labels) if not isinstance(labels, BevLabels) else [labels]
        C = labels[0].num_classes
        counts = np.zeros(C)
        for lab in labels:
            counts += lab.onehot[~lab.ignore].sum(axis=0)
        total = counts.sum()
        with np.errstate(divide="ignore"):
            w = np.where(counts > 0, total / (C * np.maximum(counts, 1)), clip[1])
        return cls(tuple(np.clip(w, *clip)))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the union is empty."""
        union = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.tp / np.maximum(union, 1), np.nan)


def softmax_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_ce(logits, labels: BevLabels, weights: ClassWeights) -> tuple[float, np.ndarray]:
    """Mean over non-ignored cells of -w_c* log p_c*, and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != labels.onehot.shape:
        raise DomainError(f"logits shape {logits.shape} != labels shape {labels.onehot.shape}")
    w = weights.as_array()
    if w.shape[0] != logits.shape[-1]:
        raise DomainError(f"{w.shape[0]} class weights for {logits.shape[-1]} classes")
    valid = ~labels.ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DomainError("every cell is ignored; loss is undefined")
    y = labels.onehot.astype(np.float64)
    cell_w = (y * w).sum(axis=-1) * valid
    logp = log_softmax(logits)
    loss = -float(np.sum(cell_w * (y * logp).sum(axis=-1))) / n_valid
    grad = (cell_w / n_valid)[..., None] * (np.exp(logp) - y)
    return loss, grad


def confusion(pred_classes, labels: BevLabels) -> ConfusionCounts:
    pred = np.asarray(pred_classes)
    if pred.shape != labels.onehot.shape[:2]:
        raise DomainError(f"prediction shape {pred.shape} != label grid {labels.onehot.shape[:2]}")
    C = labels.num_classes
    valid = ~labels.ignore
    truth = labels.class_ids()[valid]
    pred = pred[valid].astype(np.int64)
    if pred.size and (pred.min() < 0 or pred.max() >= C):
        raise DomainError(f"predicted class ids must lie in [0, {C})")
    matrix = np.bincount(truth * C + pred, minlength=C * C).reshape(C, C)
    tp = np.diag(matrix).astype(np.int64)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    return ConfusionCounts(tp, fp, fn)


def iou(pred_classes, labels: BevLabels) -> tuple[np.ndarray, ConfusionCounts]:
    counts = confusion(pred_classes, labels)
    return counts.iou(), counts


def predict_classes(logits) -> np.ndarray:
    """Per-cell argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)
