"""One-vs-rest evaluation metrics, ROC/AUC, attention export, localization.

Per-class metrics binarize one class against the rest of the confusion
matrix. Ratios with zero denominators report 0 with a flag rather than
NaN, so mean rows stay usable. AUC comes from a trapezoid sweep over
unique score thresholds (equal scores collapse into one step), which
equals the Mann-Whitney pair statistic.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from gridattn.labels import CLASS_NAMES, NUM_CLASSES
from gridattn.tiler import grid_shape


def confusion_matrix(y_true, y_pred, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts with rows = ground truth, columns = predicted."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


@dataclass
class ClassMetrics:
    accuracy: float
    recall: float
    precision: float
    f1: float
    undefined: tuple = ()  # names of ratios that had zero denominators


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def per_class_metrics(cm: np.ndarray, c: int) -> ClassMetrics:
    """One-vs-rest accuracy/recall/precision/F1 for class ``c``."""
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = int(cm[c, c])
    fn = int(cm[c].sum() - tp)
    fp = int(cm[:, c].sum() - tp)
    tn = total - tp - fn - fp
    undefined = []

    accuracy = (tp + tn) / total
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if precision + recall > 0:
        f1 = f1_score(precision, recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return ClassMetrics(accuracy, recall, precision, f1, tuple(undefined))


@dataclass
class RocCurve:
    points: list  # (threshold, fpr, tpr), threshold descending
    auc: float
    undefined: bool = False


def roc(scores, labels) -> RocCurve:
    """Threshold sweep over unique scores; AUC by the trapezoid rule.

    ``labels`` are 0/1 for membership of the class under test. A split
    that lacks one of the two label values yields an undefined curve.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        return RocCurve(points=[], auc=float("nan"), undefined=True)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j].sum())
        fp += (j - i) - int(sorted_labels[i:j].sum())
        points.append((float(sorted_scores[i]), fp / n_neg, tp / n_pos))
        i = j
    auc = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return RocCurve(points=points, auc=auc)


@dataclass
class MetricsReport:
    per_class: list  # ClassMetrics, indexed by class id
    rocs: list = field(default_factory=list)  # RocCurve or None per class

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([m.accuracy for m in self.per_class]))

    @property
    def mean_recall(self) -> float:
        return float(np.mean([m.recall for m in self.per_class]))

    @property
    def mean_precision(self) -> float:
        return float(np.mean([m.precision for m in self.per_class]))

    @property
    def mean_f1(self) -> float:
        return float(np.mean([m.f1 for m in self.per_class]))


def build_report(y_true, y_pred, probs=None) -> MetricsReport:
    """Full one-vs-rest report; probs [N, 4] adds per-class ROC curves."""
    cm = confusion_matrix(y_true, y_pred)
    per_class = [per_class_metrics(cm, c) for c in range(NUM_CLASSES)]
    rocs = []
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        y = np.asarray(y_true, dtype=np.int64)
        for c in range(NUM_CLASSES):
            rocs.append(roc(probs[:, c], (y == c).astype(int)))
    return MetricsReport(per_class=per_class, rocs=rocs)


# -- report output ------------------------------------------------------


def write_metrics_csv(report: MetricsReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class,accuracy,recall,precision,f1,auc\n")
        for c, m in enumerate(report.per_class):
            auc = ""
            if report.rocs and not report.rocs[c].undefined:
                auc = repr(report.rocs[c].auc)
            fh.write(f"{CLASS_NAMES[c]},{m.accuracy!r},{m.recall!r},{m.precision!r},{m.f1!r},{auc}\n")
        fh.write(
            f"mean,{report.mean_accuracy!r},{report.mean_recall!r},"
            f"{report.mean_precision!r},{report.mean_f1!r},\n"
        )


def write_confusion_csv(cm: np.ndarray, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("truth\\pred," + ",".join(CLASS_NAMES) + "\n")
        for c, row in enumerate(cm):
            fh.write(CLASS_NAMES[c] + "," + ",".join(str(int(v)) for v in row) + "\n")


def write_roc_csv(curve: RocCurve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold,fpr,tpr\n")
        for thr, fpr, tpr in curve.points:
            fh.write(f"{thr!r},{fpr!r},{tpr!r}\n")


def format_report_text(report: MetricsReport, title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    header = f"{'class':<20}{'accuracy':>10}{'recall':>10}{'precision':>11}{'f1':>10}{'auc':>10}"
    lines.append(header)
    for c, m in enumerate(report.per_class):
        auc = "-"
        if report.rocs and not report.rocs[c].undefined:
            auc = f"{report.rocs[c].auc:.3f}"
        lines.append(
            f"{CLASS_NAMES[c]:<20}{m.accuracy:>10.3f}{m.recall:>10.3f}"
            f"{m.precision:>11.3f}{m.f1:>10.3f}{auc:>10}"
        )
    lines.append(
        f"{'mean':<20}{report.mean_accuracy:>10.3f}{report.mean_recall:>10.3f}"
        f"{report.mean_precision:>11.3f}{report.mean_f1:>10.3f}{'':>10}"
    )
    return "\n".join(lines) + "\n"


def format_paired_table(report_a: MetricsReport, report_b: MetricsReport, name_a: str, name_b: str) -> str:
    """Side-by-side per-class metric table for two models."""
    lines = [f"{'ground truth':<20}{'metric':<12}{name_a:>16}{name_b:>16}"]
    rows = ("accuracy", "recall", "precision", "f1")
    for c in range(NUM_CLASSES):
        for metric in rows:
            a = getattr(report_a.per_class[c], metric)
            b = getattr(report_b.per_class[c], metric)
            label = CLASS_NAMES[c] if metric == "accuracy" else ""
            lines.append(f"{label:<20}{metric:<12}{a:>16.2f}{b:>16.2f}")
    for metric in rows:
        a = getattr(report_a, f"mean_{metric}")
        b = getattr(report_b, f"mean_{metric}")
        label = "mean" if metric == "accuracy" else ""
        lines.append(f"{label:<20}{metric:<12}{a:>16.2f}{b:>16.2f}")
    return "\n".join(lines) + "\n"


# -- attention maps -----------------------------------------------------


def export_attention(maps, out_dir, stem: str, fmt: str = "png"):
    """Write each head's map max-normalized to 8-bit grayscale.

    White is high weight. A sidecar text file records the map's
    pre-normalization maximum so absolute magnitudes stay recoverable.
    Returns the written image paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, m in enumerate(maps):
        arr = m if isinstance(m, np.ndarray) else m.data
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite attention map for head {i}")
        peak = float(arr.max())
        scaled = arr / peak if peak > 0 else np.zeros_like(arr)
        img = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
        path = os.path.join(out_dir, f"{stem}_head{i}.{fmt}")
        try:
            Image.fromarray(img, mode="L").save(path)
            with open(os.path.join(out_dir, f"{stem}_head{i}.max.txt"), "w", encoding="utf-8") as fh:
                fh.write(f"{peak!r}\n")
        except OSError as exc:
            raise OSError(f"failed writing attention map {path}: {exc}") from exc
        paths.append(path)
    return paths


def cells_over_boxes(boxes, image_shape, cell_size: int, overlap: int = 0) -> np.ndarray:
    """Boolean r x c mask of grid cells intersecting any given box."""
    h, w = image_shape
    r, c = grid_shape(h, w, cell_size, overlap)
    stride = cell_size - overlap
    mask = np.zeros((r, c), dtype=bool)
    for b in boxes:
        for i in range(r):
            y = i * stride
            if y + cell_size <= b.y or y >= b.y + b.h:
                continue
            for j in range(c):
                x = j * stride
                if x + cell_size <= b.x or x >= b.x + b.w:
                    continue
                mask[i, j] = True
    return mask


def localization_score(alpha: np.ndarray, lesion_cells: np.ndarray):
    """Mean attention on lesion cells over mean attention elsewhere.

    Returns None for degenerate geometry (no lesion or no background
    cells); +inf when all attention mass sits on lesion cells.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != lesion_cells.shape:
        raise ValueError("attention map and cell mask shapes differ")
    n_lesion = int(lesion_cells.sum())
    n_rest = lesion_cells.size - n_lesion
    if n_lesion == 0 or n_rest == 0:
        return None
    mean_lesion = float(alpha[lesion_cells].mean())
    mean_rest = float(alpha[~lesion_cells].mean())
    if mean_rest == 0.0:
        return math.inf
    return mean_lesion / mean_rest
