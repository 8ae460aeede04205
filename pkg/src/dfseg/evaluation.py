"""Confusion-matrix metrics and class-distribution reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError
from .models import generate_images, segnet_forward
from .shapesdata import SegDataset, batch_iterator, class_pixel_histogram


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(pred, truth, cm: np.ndarray) -> np.ndarray:
    """Return ``cm`` plus the counts of (truth, pred) pairs; rows are ground truth."""
    pred = np.asarray(pred).astype(np.int64, copy=False)
    truth = np.asarray(truth).astype(np.int64, copy=False)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    k = cm.shape[0]
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise InvalidInputError(f"{name} has class ids outside [0, {k})")
    counts = np.bincount(truth.reshape(-1) * k + pred.reshape(-1), minlength=k * k)
    return cm + counts.reshape(k, k)


def _check_nonempty(cm: np.ndarray) -> None:
    if cm.sum() == 0:
        raise InvalidInputError("confusion matrix is empty")


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both prediction and truth."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def mean_iou(cm: np.ndarray) -> float:
    _check_nonempty(cm)
    return float(np.nanmean(per_class_iou(cm)))


def pixel_accuracy(cm: np.ndarray) -> float:
    _check_nonempty(cm)
    return float(np.trace(cm) / cm.sum())


@dataclass
class EvalReport:
    mean_iou: float
    pixel_accuracy: float
    per_class_iou: list
    confusion: list
    n_images: int

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "pixel_accuracy": self.pixel_accuracy,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "confusion": [[int(v) for v in row] for row in self.confusion],
            "n_images": self.n_images,
        }


def report_from_confusion(cm: np.ndarray, n_images: int) -> EvalReport:
    return EvalReport(mean_iou(cm), pixel_accuracy(cm), per_class_iou(cm).tolist(), cm.tolist(), n_images)


@torch.no_grad()
def predict_labels(model, images: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax of the softmax map; ties go to the lowest class index."""
    probs = segnet_forward(model, images.to(next(model.parameters()).dtype)).numpy()
    return probs.argmax(axis=1)


def evaluate_model(model, dataset: SegDataset, batch_size: int = 100) -> EvalReport:
    if len(dataset) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    cm = new_confusion(model.config.num_classes)
    for images, labels in batch_iterator(dataset, batch_size, shuffle_seed=None, with_labels=True):
        cm = accumulate_confusion(predict_labels(model, images), labels.numpy(), cm)
    model.train(was_training)
    return report_from_confusion(cm, len(dataset))


def generated_distribution_report(generator, teacher, n_samples: int, seed: int = 0,
                                  batch_size: int = 64) -> np.ndarray:
    """Class histogram of the teacher's argmax predictions on generated images."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    images = generate_images(generator, n_samples, seed)
    teacher.eval()
    preds = np.concatenate([predict_labels(teacher, images[i:i + batch_size])
                            for i in range(0, n_samples, batch_size)])
    return class_pixel_histogram(preds, teacher.config.num_classes)


def distribution_entropy(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


def distribution_csv(w) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class_id", "fraction"])
    for k, v in enumerate(w):
        writer.writerow([k, repr(float(v))])
    return buf.getvalue()
