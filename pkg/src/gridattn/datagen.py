"""Deterministic synthetic tissue corpus with planted, class-typed lesions.

Backgrounds are smooth low-frequency noise ("unremarkable tissue"); each
abnormal class plants a visually distinct procedural texture patch whose
bounding box is recorded in the index. Several images share a source
group id (2-3 per group) so leakage checks have something to catch.
Everything derives from the corpus seed: per-image content comes from
per-image streams, so regeneration is byte-identical and per-image work
can run on a worker pool.

Lesion textures, by class:
  be_no_dysplasia    dark dots on a light patch
  be_with_dysplasia  oriented sinusoidal stripes
  adenocarcinoma     dark per-pixel speckle
"""

from __future__ import annotations

import concurrent.futures
import configparser
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from gridattn.errors import ConfigError, DataError
from gridattn.labels import CLASS_NAMES, NORMAL, NUM_CLASSES, class_id, highest_risk
from gridattn.tiler import save_image

DEFAULT_COUNTS = {
    "train": (135, 43, 27, 35),
    "val": (26, 15, 11, 8),
    "test": (57, 29, 13, 21),
}

SPLITS = ("train", "val", "test")


@dataclass
class CorpusSpec:
    seed: int = 0
    cell_size: int = 32
    image_size: tuple = (128, 256)
    lesions_per_image: tuple = (1, 2)
    lesion_size: tuple = (56, 112)
    group_size: tuple = (2, 3)
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    dot_spacing: int = 9
    stripe_period: int = 7
    speckle_fraction: float = 0.5
    min_variance_ratio: float = 3.0

    def __post_init__(self):
        for split in SPLITS:
            if split not in self.counts:
                raise ConfigError(f"counts missing split {split!r}")
            if len(self.counts[split]) != NUM_CLASSES:
                raise ConfigError(f"counts for {split!r} must list all {NUM_CLASSES} classes")
            if any(n < 0 for n in self.counts[split]):
                raise ConfigError("image counts must be non-negative")
        has_abnormal = any(
            any(self.counts[s][c] > 0 for c in range(1, NUM_CLASSES)) for s in SPLITS
        )
        if has_abnormal and self.lesions_per_image[1] < 1:
            raise ConfigError("abnormal classes requested but lesions_per_image allows none")
        if self.lesions_per_image[0] > self.lesions_per_image[1]:
            raise ConfigError("lesions_per_image range is reversed")
        if self.lesion_size[0] > self.lesion_size[1]:
            raise ConfigError("lesion_size range is reversed")
        if self.group_size[0] < 1 or self.group_size[0] > self.group_size[1]:
            raise ConfigError("group_size range is invalid")
        if has_abnormal and self.lesion_size[0] > self.image_size[0] - 8:
            raise ConfigError(
                f"lesion size {self.lesion_size[0]} cannot fit inside the smallest "
                f"image ({self.image_size[0]} px)"
            )

    def to_text(self) -> str:
        lines = [
            "[corpus]",
            f"seed = {self.seed}",
            f"cell_size = {self.cell_size}",
            f"image_min = {self.image_size[0]}",
            f"image_max = {self.image_size[1]}",
            f"lesions_min = {self.lesions_per_image[0]}",
            f"lesions_max = {self.lesions_per_image[1]}",
            f"lesion_min = {self.lesion_size[0]}",
            f"lesion_max = {self.lesion_size[1]}",
            f"group_min = {self.group_size[0]}",
            f"group_max = {self.group_size[1]}",
        ]
        for split in SPLITS:
            lines.append(f"counts_{split} = " + ",".join(str(n) for n in self.counts[split]))
        lines += [
            f"dot_spacing = {self.dot_spacing}",
            f"stripe_period = {self.stripe_period}",
            f"speckle_fraction = {self.speckle_fraction!r}",
            f"min_variance_ratio = {self.min_variance_ratio!r}",
        ]
        return "\n".join(lines) + "\n"


_SPEC_KEYS = {
    "seed": int,
    "cell_size": int,
    "image_min": int,
    "image_max": int,
    "lesions_min": int,
    "lesions_max": int,
    "lesion_min": int,
    "lesion_max": int,
    "group_min": int,
    "group_max": int,
    "counts_train": str,
    "counts_val": str,
    "counts_test": str,
    "dot_spacing": int,
    "stripe_period": int,
    "speckle_fraction": float,
    "min_variance_ratio": float,
}


def parse_spec_text(text: str) -> CorpusSpec:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"corpus spec syntax error: {exc}") from None
    if parser.sections() != ["corpus"]:
        raise ConfigError("corpus spec must contain exactly one [corpus] section")
    base = CorpusSpec()
    values = {}
    for key, raw in parser["corpus"].items():
        if key not in _SPEC_KEYS:
            raise ConfigError(f"unknown key {key!r} in section [corpus]")
        try:
            values[key] = _SPEC_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"bad value for [corpus] {key}: {raw!r}") from None

    def pair(lo_key, hi_key, default):
        return (values.get(lo_key, default[0]), values.get(hi_key, default[1]))

    counts = dict(DEFAULT_COUNTS)
    for split in SPLITS:
        key = f"counts_{split}"
        if key in values:
            parts = values[key].split(",")
            if len(parts) != NUM_CLASSES:
                raise ConfigError(f"{key} must list {NUM_CLASSES} comma-separated counts")
            try:
                counts[split] = tuple(int(p) for p in parts)
            except ValueError:
                raise ConfigError(f"bad value for [corpus] {key}") from None
    return CorpusSpec(
        seed=values.get("seed", base.seed),
        cell_size=values.get("cell_size", base.cell_size),
        image_size=pair("image_min", "image_max", base.image_size),
        lesions_per_image=pair("lesions_min", "lesions_max", base.lesions_per_image),
        lesion_size=pair("lesion_min", "lesion_max", base.lesion_size),
        group_size=pair("group_min", "group_max", base.group_size),
        counts=counts,
        dot_spacing=values.get("dot_spacing", base.dot_spacing),
        stripe_period=values.get("stripe_period", base.stripe_period),
        speckle_fraction=values.get("speckle_fraction", base.speckle_fraction),
        min_variance_ratio=values.get("min_variance_ratio", base.min_variance_ratio),
    )


def load_spec(path) -> CorpusSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spec_text(fh.read())


# -- index ------------------------------------------------------------


@dataclass
class Box:
    x: int
    y: int
    w: int
    h: int
    cls: int

    def encode(self) -> str:
        return f"{self.x}:{self.y}:{self.w}:{self.h}:{CLASS_NAMES[self.cls]}"

    @classmethod
    def decode(cls, text: str) -> "Box":
        parts = text.split(":")
        if len(parts) != 5:
            raise DataError(f"bad box entry {text!r}")
        x, y, w, h = (int(p) for p in parts[:4])
        return cls(x=x, y=y, w=w, h=h, cls=class_id(parts[4]))


@dataclass
class ImageRecord:
    id: str
    path: str
    label: int
    group_id: str
    split: str
    boxes: list


def derive_label(box_classes) -> int:
    """Whole-image label: the highest-risk class planted; normal if none."""
    return highest_risk(box_classes)


def write_index(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "label", "group_id", "split", "boxes"])
        for rec in records:
            writer.writerow(
                [
                    rec.id,
                    rec.path,
                    CLASS_NAMES[rec.label],
                    rec.group_id,
                    rec.split,
                    ";".join(b.encode() for b in rec.boxes),
                ]
            )


def load_index(corpus_dir):
    path = os.path.join(corpus_dir, "index.csv")
    if not os.path.exists(path):
        raise DataError(f"no index.csv in {corpus_dir}")
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["id", "path", "label", "group_id", "split", "boxes"]
        if reader.fieldnames != expected:
            raise DataError(f"index header {reader.fieldnames} != {expected}")
        for row in reader:
            boxes = [Box.decode(b) for b in row["boxes"].split(";") if b]
            records.append(
                ImageRecord(
                    id=row["id"],
                    path=row["path"],
                    label=class_id(row["label"]),
                    group_id=row["group_id"],
                    split=row["split"],
                    boxes=boxes,
                )
            )
    return records


# -- texture synthesis ------------------------------------------------


def _smooth_noise(rng, h, w, scale, amplitude):
    """Bilinear upsampling of a coarse uniform grid; zero-mean."""
    gh, gw = h // scale + 2, w // scale + 2
    coarse = rng.uniform(-amplitude, amplitude, size=(gh, gw, 3))
    ys = np.arange(h) / scale
    xs = np.arange(w) / scale
    y0 = ys.astype(np.int64)
    x0 = xs.astype(np.int64)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


BACKGROUND_TONE = np.array([0.80, 0.64, 0.74])


def render_background(rng, h, w) -> np.ndarray:
    px = BACKGROUND_TONE + _smooth_noise(rng, h, w, scale=32, amplitude=0.06)
    px += rng.uniform(-0.012, 0.012, size=(h, w, 3))
    return np.clip(px, 0.02, 0.90)


def _paint_dots(rng, region, spacing):
    h, w = region.shape[:2]
    region[:] = np.array([0.66, 0.52, 0.62]) + rng.uniform(-0.02, 0.02, size=(h, w, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    radius = 2.5
    for cy in np.arange(spacing / 2, h, spacing):
        for cx in np.arange(spacing / 2, w, spacing):
            jy = cy + rng.uniform(-1.5, 1.5)
            jx = cx + rng.uniform(-1.5, 1.5)
            mask = (yy - jy) ** 2 + (xx - jx) ** 2 <= radius**2
            region[mask] = np.array([0.28, 0.16, 0.33])


def _paint_stripes(rng, region, period):
    h, w = region.shape[:2]
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    dark = np.array([0.30, 0.24, 0.46])
    light = np.array([0.74, 0.60, 0.70])
    region[:] = dark + wave[:, :, None] * (light - dark)
    region += rng.uniform(-0.015, 0.015, size=(h, w, 3))


def _paint_speckle(rng, region, fraction):
    h, w = region.shape[:2]
    dark = rng.random((h, w)) < fraction
    region[:] = np.array([0.58, 0.46, 0.52])
    region[dark] = np.array([0.16, 0.10, 0.22])
    region += rng.uniform(-0.02, 0.02, size=(h, w, 3))


def paint_lesion(rng, pixels, box: Box, spec: CorpusSpec):
    region = pixels[box.y : box.y + box.h, box.x : box.x + box.w]
    if box.cls == 1:
        _paint_dots(rng, region, spec.dot_spacing)
    elif box.cls == 2:
        _paint_stripes(rng, region, spec.stripe_period)
    elif box.cls == 3:
        _paint_speckle(rng, region, spec.speckle_fraction)
    else:
        raise ValueError(f"no lesion texture for class {box.cls}")
    np.clip(region, 0.02, 0.90, out=region)


def _boxes_overlap(a: Box, b: Box) -> bool:
    return not (
        a.x + a.w <= b.x or b.x + b.w <= a.x or a.y + a.h <= b.y or b.y + b.h <= a.y
    )


def render_image(spec: CorpusSpec, ordinal: int, label: int):
    """One image plus its lesion boxes, from the per-image stream."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(200, ordinal)))
    h = int(rng.integers(spec.image_size[0], spec.image_size[1] + 1))
    w = int(rng.integers(spec.image_size[0], spec.image_size[1] + 1))
    pixels = render_background(rng, h, w)
    boxes = []
    if label != NORMAL:
        n_lesions = int(rng.integers(spec.lesions_per_image[0], spec.lesions_per_image[1] + 1))
        n_lesions = max(n_lesions, 1)  # the labeled class must be present
        classes = [label] + [int(rng.integers(1, label + 1)) for _ in range(n_lesions - 1)]
        for cls in classes:
            bh = int(rng.integers(spec.lesion_size[0], min(spec.lesion_size[1], h - 8) + 1))
            bw = int(rng.integers(spec.lesion_size[0], min(spec.lesion_size[1], w - 8) + 1))
            box = None
            for _attempt in range(10):
                y = int(rng.integers(4, h - bh - 3))
                x = int(rng.integers(4, w - bw - 3))
                candidate = Box(x=x, y=y, w=bw, h=bh, cls=cls)
                if not any(_boxes_overlap(candidate, b) for b in boxes):
                    box = candidate
                    break
            if box is None:
                box = candidate
            paint_lesion(rng, pixels, box, spec)
            boxes.append(box)
        assert derive_label([b.cls for b in boxes]) == label
    return pixels, boxes


def _plan_records(spec: CorpusSpec):
    """Assign ids, labels, groups, and splits before any pixel work."""
    corpus_rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(100,)))
    plan = []
    ordinal = 0
    group_counter = 0
    for split in SPLITS:
        labels = []
        for cls in range(NUM_CLASSES):
            labels.extend([cls] * spec.counts[split][cls])
        labels = [labels[i] for i in corpus_rng.permutation(len(labels))]
        pos = 0
        while pos < len(labels):
            size = int(corpus_rng.integers(spec.group_size[0], spec.group_size[1] + 1))
            group_id = f"g{group_counter:04d}"
            group_counter += 1
            for label in labels[pos : pos + size]:
                plan.append((ordinal, label, group_id, split))
                ordinal += 1
            pos += size
    return plan


def generate(spec: CorpusSpec, out_dir, workers: int = 1):
    """Write images/, index.csv and spec.txt under out_dir; return records."""
    plan = _plan_records(spec)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)

    def render(entry):
        ordinal, label, _group, _split = entry
        return render_image(spec, ordinal, label)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(render, plan))
    else:
        rendered = [render(entry) for entry in plan]

    records = []
    for (ordinal, label, group_id, split), (pixels, boxes) in zip(plan, rendered):
        image_id = f"img_{ordinal:04d}"
        rel = f"images/{image_id}.png"
        save_image(pixels, os.path.join(out_dir, rel))
        records.append(
            ImageRecord(id=image_id, path=rel, label=label, group_id=group_id, split=split, boxes=boxes)
        )
    write_index(records, os.path.join(out_dir, "index.csv"))
    with open(os.path.join(out_dir, "spec.txt"), "w", encoding="utf-8") as fh:
        fh.write(spec.to_text())
    return records


# -- fraction-driven splitting ---------------------------------------


def split(records, fractions, seed: int):
    """Re-tag records with splits assigned at group level.

    Greedy, label-stratified: groups land on the split with the largest
    remaining per-class need. Groups are atomic, so achieved counts sit
    within one group of the targets.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    groups = {}
    for rec in records:
        groups.setdefault(rec.group_id, []).append(rec)
    if len(groups) < len(SPLITS):
        raise DataError(
            f"cannot split {len(groups)} group(s) into {len(SPLITS)} disjoint sets"
        )
    total_per_class = np.zeros(NUM_CLASSES)
    for rec in records:
        total_per_class[rec.label] += 1

    targets = {s: f * total_per_class for s, f in zip(SPLITS, fractions)}
    have = {s: np.zeros(NUM_CLASSES) for s in SPLITS}
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(300,)))
    group_ids = sorted(groups)
    order = [group_ids[i] for i in rng.permutation(len(group_ids))]
    # larger groups first gives the greedy packing less leftover slack
    order.sort(key=lambda g: -len(groups[g]))

    assignment = {}
    for gid in order:
        counts = np.zeros(NUM_CLASSES)
        for rec in groups[gid]:
            counts[rec.label] += 1
        best_split, best_key = None, None
        for s in SPLITS:
            need = np.maximum(targets[s] - have[s], 0.0)
            overlap = float(np.minimum(counts, need).sum())
            deficit = float(need.sum())
            key = (overlap, deficit)
            if best_key is None or key > best_key:
                best_key = key
                best_split = s
        assignment[gid] = best_split
        have[best_split] += counts

    out = []
    for rec in records:
        out.append(
            ImageRecord(
                id=rec.id,
                path=rec.path,
                label=rec.label,
                group_id=rec.group_id,
                split=assignment[rec.group_id],
                boxes=list(rec.boxes),
            )
        )
    return out


# -- texture separability ----------------------------------------------


def local_variance(pixels: np.ndarray, block: int = 4) -> float:
    """Mean per-block grayscale variance; the texture-strength measure."""
    gray = pixels.mean(axis=2)
    h, w = gray.shape
    hh, ww = h - h % block, w - w % block
    if hh == 0 or ww == 0:
        return 0.0
    blocks = gray[:hh, :ww].reshape(hh // block, block, ww // block, block)
    return float(blocks.transpose(0, 2, 1, 3).reshape(-1, block * block).var(axis=1).mean())


def lesion_background_ratio(pixels: np.ndarray, boxes, block: int = 4) -> float:
    """Smallest lesion-to-background local-variance ratio in one image.

    Blocks fully inside a box count as lesion, blocks touching no box as
    background; straddling blocks are ignored.
    """
    gray = pixels.mean(axis=2)
    h, w = gray.shape
    hh, ww = h - h % block, w - w % block
    gray = gray[:hh, :ww]
    mask = np.zeros((h, w), dtype=np.float64)
    for b in boxes:
        mask[b.y : b.y + b.h, b.x : b.x + b.w] = 1.0
    mask = mask[:hh, :ww]

    def blockwise(arr, reducer):
        tiles = arr.reshape(hh // block, block, ww // block, block).transpose(0, 2, 1, 3)
        return reducer(tiles.reshape(-1, block * block), axis=1)

    variances = blockwise(gray, np.var)
    coverage = blockwise(mask, np.mean)
    bg = variances[coverage == 0.0]
    ratios = []
    for b in boxes:
        inside = np.zeros((h, w), dtype=np.float64)
        inside[b.y : b.y + b.h, b.x : b.x + b.w] = 1.0
        sel = blockwise(inside[:hh, :ww], np.mean) == 1.0
        if sel.any():
            ratios.append(float(variances[sel].mean()))
    if not ratios or bg.size == 0:
        return float("inf")
    return min(ratios) / max(float(bg.mean()), 1e-9)
