"""Segmentation and attack-quality metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import IGNORE_INDEX, SegTransError, ShapeMismatch, image_array, label_array


class AllClassesEmpty(SegTransError, ValueError):
    pass


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over the class axis (first axis of ``C x H x W``, second if batched).

    ``np.argmax`` returns the first maximum, so ties resolve to the lowest
    class index.
    """
    logits = np.asarray(logits)
    axis = 0 if logits.ndim == 3 else 1
    return np.argmax(logits, axis=axis)


def confusion_matrix(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Counts with rows indexed by ground truth and columns by prediction."""
    pred = label_array(pred)
    gt = label_array(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    keep = (gt != ignore_index) & (gt >= 0) & (gt < num_classes)
    idx = num_classes * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU for every class; NaN where the class is absent from both maps."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeMismatch(f"confusion matrix must be square, got {cm.shape}")
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def miou(cm: np.ndarray) -> tuple[float, list[float]]:
    """Mean IoU in percent over classes with a non-empty union.

    Returns the mean and the per-class IoU list (fractions, NaN for
    excluded classes).
    """
    ious = per_class_iou(cm)
    present = ~np.isnan(ious)
    if not present.any():
        raise AllClassesEmpty("every class has an empty union")
    return float(100.0 * ious[present].mean()), ious.tolist()


def asr(benign_miou: float, adversarial_miou: float) -> float:
    return benign_miou - adversarial_miou


def psnr(x, x_adv, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a = np.asarray(image_array(x), dtype=np.float64)
    b = np.asarray(image_array(x_adv), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(20.0 * math.log10(max_val / math.sqrt(mse)))


def posi_ratio(pred, gt, ignore_index: int = IGNORE_INDEX) -> float:
    """Fraction of non-ignored pixels predicted correctly (1 - MisRatio)."""
    correct, total = posi_counts(pred, gt, ignore_index)
    return correct / total if total else float("nan")


def posi_counts(pred, gt, ignore_index: int = IGNORE_INDEX) -> tuple[int, int]:
    pred = label_array(pred)
    gt = label_array(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    keep = gt != ignore_index
    return int((pred[keep] == gt[keep]).sum()), int(keep.sum())


@dataclass
class MetricReport:
    """Dataset-level comparison of benign and adversarial predictions.

    mIoU and ASR are percentages. ``posi_ratio`` and ``per_class_iou``
    (fractions, NaN for classes absent from both maps) describe the
    adversarial predictions.
    """

    benign_miou: float
    adversarial_miou: float
    asr: float
    psnr_db: float
    posi_ratio: float
    per_class_iou: list[float] = field(default_factory=list)
    benign_posi_ratio: float = float("nan")
    n_images: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class SegEvaluator:
    """Accumulates global confusion matrices over a dataset.

    Evaluators merge with ``+``, so per-image work can be split and the
    results summed in any order.
    """

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.cm_benign = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.cm_adv = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.psnrs: list[float] = []
        self.correct_benign = self.correct_adv = self.total = 0
        self.count = 0

    def add(self, gt, pred_benign, pred_adv, x=None, x_adv=None) -> None:
        self.cm_benign += confusion_matrix(pred_benign, gt, self.num_classes, self.ignore_index)
        self.cm_adv += confusion_matrix(pred_adv, gt, self.num_classes, self.ignore_index)
        cb, total = posi_counts(pred_benign, gt, self.ignore_index)
        ca, _ = posi_counts(pred_adv, gt, self.ignore_index)
        self.correct_benign += cb
        self.correct_adv += ca
        self.total += total
        self.count += 1
        if x is not None and x_adv is not None:
            self.psnrs.append(psnr(x, x_adv))

    def __add__(self, other: "SegEvaluator") -> "SegEvaluator":
        out = SegEvaluator(self.num_classes, self.ignore_index)
        out.cm_benign = self.cm_benign + other.cm_benign
        out.cm_adv = self.cm_adv + other.cm_adv
        out.psnrs = self.psnrs + other.psnrs
        out.correct_benign = self.correct_benign + other.correct_benign
        out.correct_adv = self.correct_adv + other.correct_adv
        out.total = self.total + other.total
        out.count = self.count + other.count
        return out

    def report(self) -> MetricReport:
        benign, _ = miou(self.cm_benign)
        adv, ious = miou(self.cm_adv)
        return MetricReport(
            benign_miou=benign,
            adversarial_miou=adv,
            asr=asr(benign, adv),
            psnr_db=float(np.mean(self.psnrs)) if self.psnrs else math.inf,
            posi_ratio=self.correct_adv / self.total if self.total else float("nan"),
            per_class_iou=ious,
            benign_posi_ratio=self.correct_benign / self.total if self.total else float("nan"),
            n_images=self.count,
        )
