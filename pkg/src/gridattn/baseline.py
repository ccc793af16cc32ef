"""Sliding-window comparison method.

A crop-level classifier (the shared CNN backbone plus a linear head) is
trained on windows cut from inside annotated lesion boxes, with windows
from normal images supplying the normal class. Whole-image inference
slides the classifier over the image and aggregates window predictions
with a count-threshold heuristic evaluated in clinical priority order;
the thresholds come from an exhaustive grid search on validation
predictions.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from itertools import product

import numpy as np

from gridattn import autodiff as ad
from gridattn import config as cfgmod
from gridattn import extractor as extractor_mod
from gridattn import metrics, trainer
from gridattn.autodiff import Tensor, backward, cross_entropy
from gridattn.errors import CheckpointMismatchError, ConfigError, DataError
from gridattn.extractor import ExtractorConfig, glorot_uniform
from gridattn.labels import CLASS_NAMES, NORMAL, NUM_CLASSES, RISK_DESCENDING

logger = logging.getLogger(__name__)


@dataclass
class CropSample:
    crop: np.ndarray  # crop_size x crop_size x 3
    label: int
    group_id: str


@dataclass(frozen=True)
class Heuristic:
    """Per-class window-count thresholds with confidence filtering.

    ``count_thresholds[c]`` is the minimum number of windows predicted
    as class c with confidence >= ``conf_thresholds[c]``; classes are
    checked most-dangerous first and normal is the fallback.
    """

    count_thresholds: tuple  # t_c for class ids 1..3, indexed by id-1
    conf_thresholds: tuple  # q_c likewise

    def __post_init__(self):
        if len(self.count_thresholds) != NUM_CLASSES - 1 or len(self.conf_thresholds) != NUM_CLASSES - 1:
            raise ConfigError("heuristic needs thresholds for every abnormal class")
        if any(t < 1 for t in self.count_thresholds):
            raise ConfigError("count thresholds must be >= 1")
        if any(not 0.0 < q < 1.0 for q in self.conf_thresholds):
            raise ConfigError("confidence thresholds must lie in (0, 1)")

    def t(self, cls: int) -> int:
        return self.count_thresholds[cls - 1]

    def q(self, cls: int) -> float:
        return self.conf_thresholds[cls - 1]

    def to_text(self) -> str:
        lines = []
        for cls in range(1, NUM_CLASSES):
            lines.append(f"t_{CLASS_NAMES[cls]} = {self.t(cls)}")
            lines.append(f"q_{CLASS_NAMES[cls]} = {self.q(cls)!r}")
        return "\n".join(lines) + "\n"


def harvest_crops(images_with_boxes, crop_size: int, stride: int):
    """Windows from inside ROI boxes, labeled by the box's class.

    ``images_with_boxes`` yields (pixels, label, group_id, boxes). On
    normal images, all windows (which lie outside every box) are
    harvested as normal. Boxes smaller than the crop are skipped with a
    warning.
    """
    crops = []
    for pixels, label, group_id, boxes in images_with_boxes:
        h, w = pixels.shape[:2]
        if label == NORMAL:
            for y in range(0, h - crop_size + 1, stride):
                for x in range(0, w - crop_size + 1, stride):
                    crops.append(
                        CropSample(
                            crop=pixels[y : y + crop_size, x : x + crop_size].copy(),
                            label=NORMAL,
                            group_id=group_id,
                        )
                    )
            continue
        for box in boxes:
            if box.w < crop_size or box.h < crop_size:
                logger.warning(
                    "box %dx%d smaller than crop size %d; skipped", box.w, box.h, crop_size
                )
                continue
            for dy in range(0, box.h - crop_size + 1, stride):
                for dx in range(0, box.w - crop_size + 1, stride):
                    y, x = box.y + dy, box.x + dx
                    crops.append(
                        CropSample(
                            crop=pixels[y : y + crop_size, x : x + crop_size].copy(),
                            label=box.cls,
                            group_id=group_id,
                        )
                    )
    return crops


def aggregate(window_predictions, heuristic: Heuristic) -> int:
    """Whole-image class from (class, confidence) window predictions.

    First abnormal class, in priority order, whose confidence-filtered
    window count reaches its threshold; normal otherwise. Invariant to
    the order of the prediction list.
    """
    if not window_predictions:
        raise ValueError("aggregate needs at least one window prediction")
    for cls in RISK_DESCENDING:
        if cls == NORMAL:
            continue
        q = heuristic.q(cls)
        count = sum(1 for c, conf in window_predictions if c == cls and conf >= q)
        if count >= heuristic.t(cls):
            return cls
    return NORMAL


def search_thresholds(val_items, count_grid, conf_grid) -> Heuristic:
    """Exhaustive grid search maximizing mean per-class F1 on validation.

    ``val_items`` is a list of (true_label, window_predictions) pairs,
    with window predictions computed once beforehand. Ties break toward
    the lexicographically smallest (t-vector, q-vector) in class-id
    order.
    """
    if not count_grid or not conf_grid:
        raise ConfigError("threshold search needs non-empty candidate grids")
    if not val_items:
        raise DataError("threshold search needs validation predictions")
    labels = [label for label, _ in val_items]
    best_key = None
    best = None
    for ts in product(sorted(count_grid), repeat=NUM_CLASSES - 1):
        for qs in product(sorted(conf_grid), repeat=NUM_CLASSES - 1):
            heuristic = Heuristic(count_thresholds=ts, conf_thresholds=qs)
            preds = [aggregate(windows, heuristic) for _, windows in val_items]
            cm = metrics.confusion_matrix(labels, preds)
            mean_f1 = float(
                np.mean([metrics.per_class_metrics(cm, c).f1 for c in range(NUM_CLASSES)])
            )
            if best_key is None or mean_f1 > best_key:
                best_key = mean_f1
                best = heuristic
    return best


# -- crop classifier ----------------------------------------------------


class CropClassifier:
    """The shared CNN backbone with a linear class head over crops."""

    def __init__(self, extractor_config: ExtractorConfig, params: dict, head_w: Tensor, head_b: Tensor):
        self.extractor_config = extractor_config
        self.params = params
        self.head_w = head_w
        self.head_b = head_b
        self.norm_mean = np.zeros(3)
        self.norm_std = np.ones(3)

    @classmethod
    def create(cls, extractor_config: ExtractorConfig, seed: int) -> "CropClassifier":
        params = extractor_mod.init_extractor(extractor_config, seed)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5,)))
        k = extractor_config.feature_size
        head_w = Tensor(glorot_uniform(rng, (NUM_CLASSES, k), k, NUM_CLASSES), requires_grad=True)
        head_b = Tensor(np.zeros(NUM_CLASSES), requires_grad=True)
        return cls(extractor_config, params, head_w, head_b)

    def named_parameters(self) -> dict:
        out = dict(self.params)
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def trainable_parameters(self) -> dict:
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}

    def set_normalization(self, mean, std):
        self.norm_mean = np.asarray(mean, dtype=np.float64)
        self.norm_std = np.asarray(std, dtype=np.float64)

    def logits(self, crops: np.ndarray) -> Tensor:
        """Batched forward over [n, s, s, 3] crops."""
        batch = (crops - self.norm_mean) / self.norm_std
        x = Tensor(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))
        for i, (cout, kernel, stride) in enumerate(self.extractor_config.stages):
            pad = kernel // 2
            x = ad.conv2d(x, self.params[f"conv{i}_w"], stride=stride, pad=(pad, pad))
            x = ad.relu(x + self.params[f"conv{i}_b"].reshape((cout, 1, 1)))
        feats = x.mean(axis=(2, 3))
        return ad.linear(feats, self.head_w, self.head_b)

    def predict_windows(self, pixels: np.ndarray, crop_size: int, stride: int):
        """(class, confidence) for every window of one image, plus the
        per-class mean probability used as the image's score vector."""
        h, w = pixels.shape[:2]
        windows = []
        for y in range(0, max(h - crop_size, 0) + 1, stride):
            for x in range(0, max(w - crop_size, 0) + 1, stride):
                win = pixels[y : y + crop_size, x : x + crop_size]
                if win.shape[0] < crop_size or win.shape[1] < crop_size:
                    padded = np.zeros((crop_size, crop_size, 3))
                    padded[: win.shape[0], : win.shape[1]] = win
                    win = padded
                windows.append(win)
        batch = np.stack(windows)
        logits = self.logits(batch).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        preds = [(int(np.argmax(p)), float(p.max())) for p in probs]
        return preds, probs.mean(axis=0)


def subsample_per_class(crops, cap: int, rng):
    """At most ``cap`` crops per class, drawn without replacement."""
    by_class = {}
    for crop in crops:
        by_class.setdefault(crop.label, []).append(crop)
    kept = []
    for cls in sorted(by_class):
        group = by_class[cls]
        if len(group) > cap:
            idx = rng.choice(len(group), size=cap, replace=False)
            group = [group[i] for i in sorted(idx)]
        kept.extend(group)
    return kept


def train_crop_classifier(
    classifier: CropClassifier,
    train_crops,
    val_crops,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
):
    """Adam on crop batches; returns (epoch, train_loss, val_loss, val_acc)
    rows and keeps the best-validation-loss weights on the classifier."""
    if not train_crops or not val_crops:
        raise DataError("crop training needs non-empty train and val crop sets")
    shuffle_rng = trainer.rng_stream(seed, 14)
    opt = trainer.Adam(classifier.trainable_parameters())
    x_train = np.stack([c.crop for c in train_crops])
    y_train = np.array([c.label for c in train_crops])
    x_val = np.stack([c.crop for c in val_crops])
    y_val = np.array([c.label for c in val_crops])
    history = []
    best_val = float("inf")
    best_weights = None
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_crops))
        total = 0.0
        for lo in range(0, len(order), batch_size):
            sel = order[lo : lo + batch_size]
            opt.zero_grad()
            loss = cross_entropy(classifier.logits(x_train[sel]), y_train[sel])
            backward(loss)
            opt.step(lr)
            total += float(loss.data) * len(sel)
        train_loss = total / len(train_crops)
        val_logits = classifier.logits(x_val).data
        val_loss = float(cross_entropy(Tensor(val_logits), y_val).data)
        val_acc = float((val_logits.argmax(axis=1) == y_val).mean())
        history.append((epoch, train_loss, val_loss, val_acc))
        if val_loss < best_val:
            best_val = val_loss
            best_weights = {n: p.data.copy() for n, p in classifier.named_parameters().items()}
    if best_weights is not None:
        for name, p in classifier.named_parameters().items():
            p.data = best_weights[name]
    return history


# -- checkpointing -------------------------------------------------------


def checkpoint_from_classifier(
    classifier: CropClassifier, heuristic: Heuristic, run_cfg: cfgmod.RunConfig, epoch: int
) -> trainer.Checkpoint:
    cfg = cfgmod.RunConfig.parse_text(run_cfg.to_text())
    cfg.set("run", "model", "baseline")
    for cls in range(1, NUM_CLASSES):
        cfg.set("heuristic", f"t_{CLASS_NAMES[cls]}", heuristic.t(cls))
        cfg.set("heuristic", f"q_{CLASS_NAMES[cls]}", heuristic.q(cls))
    return trainer.Checkpoint(
        weights={n: p.data.copy() for n, p in classifier.named_parameters().items()},
        moment1={},
        moment2={},
        adam_t=0,
        epoch=epoch,
        best_val=0.0,
        norm_mean=classifier.norm_mean,
        norm_std=classifier.norm_std,
        config_text=cfg.to_text(),
    )


def classifier_from_checkpoint(ckpt: trainer.Checkpoint):
    """Rebuild (classifier, heuristic, run_cfg) from a baseline checkpoint."""
    run_cfg = cfgmod.RunConfig.parse_text(ckpt.config_text)
    if run_cfg.get("run", "model") != "baseline":
        raise CheckpointMismatchError(
            f"checkpoint holds a {run_cfg.get('run', 'model')!r} model, not a baseline"
        )
    classifier = CropClassifier.create(cfgmod.extractor_config(run_cfg), seed=0)
    trainer.apply_weights(classifier.named_parameters(), ckpt.weights)
    classifier.set_normalization(ckpt.norm_mean, ckpt.norm_std)
    counts, confs = cfgmod.heuristic_thresholds(run_cfg)
    heuristic = Heuristic(
        count_thresholds=tuple(counts[c] for c in range(1, NUM_CLASSES)),
        conf_thresholds=tuple(confs[c] for c in range(1, NUM_CLASSES)),
    )
    return classifier, heuristic, run_cfg


def write_heuristic(heuristic: Heuristic, out_dir):
    path = os.path.join(out_dir, "heuristic.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(heuristic.to_text())
    return path
