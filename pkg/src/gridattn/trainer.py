"""End-to-end optimization from image-level labels only.

Covers the learning-rate schedule (per-epoch decay with periodic hard
resets), Adam, tissue-level geometric augmentation (rotate then scale,
re-tiled every draw), the training loop with best-validation-loss
checkpointing, and the binary checkpoint format.

RNG streams are split per concern (init / augmentation / dropout /
shuffling) so toggling one knob never perturbs the others.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from gridattn import config as cfgmod
from gridattn.autodiff import assert_finite, backward, cross_entropy
from gridattn.errors import CheckpointMismatchError, DataError
from gridattn.model import AttentionPipeline
from gridattn.tiler import SlideImage, load_image, remove_background, tissue_stats

CHECKPOINT_MAGIC = b"GATT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay: float = 0.95
    restart_lr: float = 1e-4
    restart_period: int = 50
    epochs: int = 30
    batch_size: int = 2
    seed: int = 0
    augment: bool = True
    rotation: tuple = (0.0, 360.0)
    scale_range: tuple = (0.8, 1.2)

    def __post_init__(self):
        if self.restart_period < 1:
            raise ValueError("restart_period must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"scale range must be ordered and positive, got {self.scale_range}")


def train_config_from(cfg: cfgmod.RunConfig) -> TrainConfig:
    return TrainConfig(
        lr0=cfg.get("train", "lr0"),
        decay=cfg.get("train", "decay"),
        restart_lr=cfg.get("train", "restart_lr"),
        restart_period=cfg.get("train", "restart_period"),
        epochs=cfg.get("train", "epochs"),
        batch_size=cfg.get("train", "batch_size"),
        seed=cfg.get("train", "seed"),
        augment=cfg.get("train", "augment"),
        rotation=(cfg.get("train", "rotation_min"), cfg.get("train", "rotation_max")),
        scale_range=(cfg.get("train", "scale_min"), cfg.get("train", "scale_max")),
    )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for an epoch: decay per epoch, hard reset to
    restart_lr at every multiple of restart_period (epoch >= period),
    decay resuming from the reset value."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {cfg.epochs} epochs")
    if epoch < cfg.restart_period:
        return cfg.lr0 * cfg.decay**epoch
    return cfg.restart_lr * cfg.decay ** (epoch % cfg.restart_period)


class Adam:
    """Standard bias-corrected Adam over a fixed set of named tensors."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -- augmentation -----------------------------------------------------


def rotate_nn(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image center, zero fill, nearest-neighbor."""
    h, w = pixels.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    sy = np.rint(cos * dy + sin * dx + cy).astype(np.int64)
    sx = np.rint(-sin * dy + cos * dx + cx).astype(np.int64)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(pixels)
    out[valid] = pixels[sy[valid], sx[valid]]
    return out


def scale_nn(pixels: np.ndarray, factor: float) -> np.ndarray:
    """Resize by a scale factor, nearest-neighbor."""
    h, w = pixels.shape[:2]
    oh = max(1, int(round(h * factor)))
    ow = max(1, int(round(w * factor)))
    sy = np.minimum(np.floor((np.arange(oh) + 0.5) / factor).astype(np.int64), h - 1)
    sx = np.minimum(np.floor((np.arange(ow) + 0.5) / factor).astype(np.int64), w - 1)
    return pixels[sy[:, None], sx[None, :]]


def augment(image: SlideImage, rng, rotation=(0.0, 360.0), scale_range=(0.8, 1.2)) -> SlideImage:
    """Random rotation then random scaling; label and group unchanged.

    Applied to the whole tissue image before tiling, so cell boundaries
    shift between epochs.
    """
    angle = float(rng.uniform(rotation[0], rotation[1]))
    factor = float(rng.uniform(scale_range[0], scale_range[1]))
    px = rotate_nn(image.pixels, angle)
    px = scale_nn(px, factor)
    return SlideImage(pixels=px, label=image.label, group_id=image.group_id)


# -- checkpoints ------------------------------------------------------


@dataclass
class Checkpoint:
    weights: dict
    moment1: dict
    moment2: dict
    adam_t: int = 0
    epoch: int = 0
    best_val: float = float("inf")
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    config_text: str = ""


def _write_records(out, arrays: dict):
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        arr = np.asarray(arr, dtype=np.float64)
        out.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            out.write(struct.pack("<I", dim))
        out.write(arr.tobytes(order="C"))


def _read_records(buf) -> dict:
    (count,) = struct.unpack("<I", buf.read(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape)
        arrays[name] = data.copy()
    return arrays


def save_checkpoint(path, ckpt: Checkpoint):
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", ckpt.epoch))
    out.write(struct.pack("<Q", ckpt.adam_t))
    out.write(struct.pack("<d", ckpt.best_val))
    out.write(hashlib.sha256(ckpt.config_text.encode("utf-8")).digest())
    out.write(np.asarray(ckpt.norm_mean, dtype="<f8").tobytes())
    out.write(np.asarray(ckpt.norm_std, dtype="<f8").tobytes())
    _write_records(out, ckpt.weights)
    _write_records(out, ckpt.moment1)
    _write_records(out, ckpt.moment2)
    cb = ckpt.config_text.encode("utf-8")
    out.write(struct.pack("<I", len(cb)))
    out.write(cb)
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointMismatchError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"{path}: unsupported checkpoint version {version}")
    (epoch,) = struct.unpack("<I", buf.read(4))
    (adam_t,) = struct.unpack("<Q", buf.read(8))
    (best_val,) = struct.unpack("<d", buf.read(8))
    config_hash = buf.read(32)
    norm_mean = np.frombuffer(buf.read(24), dtype="<f8").copy()
    norm_std = np.frombuffer(buf.read(24), dtype="<f8").copy()
    weights = _read_records(buf)
    moment1 = _read_records(buf)
    moment2 = _read_records(buf)
    (clen,) = struct.unpack("<I", buf.read(4))
    config_text = buf.read(clen).decode("utf-8")
    if hashlib.sha256(config_text.encode("utf-8")).digest() != config_hash:
        raise CheckpointMismatchError(f"{path}: config snapshot does not match its hash")
    return Checkpoint(
        weights=weights,
        moment1=moment1,
        moment2=moment2,
        adam_t=adam_t,
        epoch=epoch,
        best_val=best_val,
        norm_mean=norm_mean,
        norm_std=norm_std,
        config_text=config_text,
    )


def apply_weights(named_params: dict, weights: dict):
    """Copy checkpoint arrays into live tensors, validating names/shapes."""
    missing = sorted(set(named_params) - set(weights))
    extra = sorted(set(weights) - set(named_params))
    if missing or extra:
        raise CheckpointMismatchError(
            f"weight names differ: missing {missing or 'none'}, unexpected {extra or 'none'}"
        )
    for name, p in named_params.items():
        arr = weights[name]
        if arr.shape != p.data.shape:
            raise CheckpointMismatchError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.data.shape}"
            )
        p.data = arr.astype(np.float64).copy()


def build_pipeline(run_cfg: cfgmod.RunConfig, seed=None) -> AttentionPipeline:
    if seed is None:
        seed = run_cfg.get("train", "seed")
    return AttentionPipeline.create(
        cfgmod.extractor_config(run_cfg),
        num_heads=run_cfg.get("attention", "heads"),
        head_spatial=run_cfg.get("attention", "head_extent"),
        hidden=run_cfg.get("attention", "hidden"),
        dropout_p=run_cfg.get("attention", "dropout"),
        seed=seed,
        cell_size=run_cfg.get("data", "cell_size"),
        overlap=run_cfg.get("data", "overlap"),
        white_threshold=run_cfg.get("data", "white_threshold"),
        tissue_fraction=run_cfg.get("data", "tissue_fraction"),
    )


def pipeline_from_checkpoint(ckpt: Checkpoint) -> AttentionPipeline:
    run_cfg = cfgmod.RunConfig.parse_text(ckpt.config_text)
    if run_cfg.get("run", "model") != "attention":
        raise CheckpointMismatchError(
            f"checkpoint holds a {run_cfg.get('run', 'model')!r} model, not an attention model"
        )
    pipeline = build_pipeline(run_cfg)
    apply_weights(pipeline.named_parameters(), ckpt.weights)
    pipeline.set_normalization(ckpt.norm_mean, ckpt.norm_std)
    return pipeline


# -- training loop ----------------------------------------------------


def check_group_splits(records):
    """Refuse group ids that straddle splits (source-slide leakage)."""
    seen = {}
    for rec in records:
        seen.setdefault(rec.group_id, set()).add(rec.split)
    leaked = {g: sorted(s) for g, s in seen.items() if len(s) > 1}
    if leaked:
        g, splits = next(iter(leaked.items()))
        raise DataError(
            f"group leakage: group {g!r} appears in splits {splits} "
            f"({len(leaked)} leaking group(s) total)"
        )


def rng_stream(seed: int, concern: int):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(concern,)))


AUGMENT_STREAM = 2
DROPOUT_STREAM = 3
SHUFFLE_STREAM = 4


def _to_u8(px: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)


def load_split_images(records, corpus_dir, split: str):
    """Background-cropped images of one split, cached as uint8."""
    images, labels = [], []
    for rec in records:
        if rec.split != split:
            continue
        px = remove_background(load_image(f"{corpus_dir}/{rec.path}"))
        images.append(_to_u8(px))
        labels.append(rec.label)
    return images, labels


@dataclass
class TrainResult:
    history: list
    best_val: float
    steps: int
    checkpoint_path: str


LOG_HEADER = "epoch,lr,train_loss,val_loss,val_acc"


def write_log(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for epoch, lr, tl, vl, va in rows:
            fh.write(f"{epoch},{lr!r},{tl!r},{vl!r},{va!r}\n")


def train(
    records,
    corpus_dir,
    pipeline: AttentionPipeline,
    tcfg: TrainConfig,
    run_cfg: cfgmod.RunConfig,
    out_dir,
    resume: Checkpoint = None,
) -> TrainResult:
    """Optimize the pipeline on the train split, validating every epoch.

    The best-validation-loss checkpoint is kept at out_dir/checkpoint.bin
    and the per-epoch log at out_dir/train_log.csv.
    """
    check_group_splits(records)
    os.makedirs(out_dir, exist_ok=True)
    train_images, train_labels = load_split_images(records, corpus_dir, "train")
    val_images, val_labels = load_split_images(records, corpus_dir, "val")
    if not train_images:
        raise DataError("train split is empty")
    if not val_images:
        raise DataError("val split is empty")

    config_text = run_cfg.to_text()
    aug_rng = rng_stream(tcfg.seed, AUGMENT_STREAM)
    drop_rng = rng_stream(tcfg.seed, DROPOUT_STREAM)
    shuffle_rng = rng_stream(tcfg.seed, SHUFFLE_STREAM)

    start_epoch = 0
    best_val = float("inf")
    if resume is not None:
        apply_weights(pipeline.named_parameters(), resume.weights)
        pipeline.set_normalization(resume.norm_mean, resume.norm_std)
        start_epoch = resume.epoch
        best_val = resume.best_val
    else:
        mean, std = tissue_stats(
            (img / 255.0 for img in train_images), pipeline.white_threshold
        )
        pipeline.set_normalization(mean, std)

    opt = Adam(pipeline.trainable_parameters())
    if resume is not None:
        for name in opt.m:
            opt.m[name] = resume.moment1[name].copy()
            opt.v[name] = resume.moment2[name].copy()
        opt.t = resume.adam_t

    ckpt_path = f"{out_dir}/checkpoint.bin"
    log_path = f"{out_dir}/train_log.csv"
    history = []
    n_train = len(train_images)

    for epoch in range(start_epoch, tcfg.epochs):
        lr = lr_at(epoch, tcfg)
        order = shuffle_rng.permutation(n_train)
        epoch_loss = 0.0
        for lo in range(0, n_train, tcfg.batch_size):
            batch = order[lo : lo + tcfg.batch_size]
            opt.zero_grad()
            terms = []
            for idx in batch:
                px = train_images[idx] / 255.0
                if tcfg.augment:
                    img = SlideImage(pixels=px, label=train_labels[idx], group_id="")
                    px = augment(img, aug_rng, tcfg.rotation, tcfg.scale_range).pixels
                logits, _ = pipeline.forward_pixels(px, mode="train", rng=drop_rng)
                terms.append(cross_entropy(logits, train_labels[idx]))
            loss = terms[0] if len(terms) == 1 else sum(terms[1:], start=terms[0])
            loss = loss / len(terms)
            assert_finite(loss, "training loss")
            backward(loss)
            opt.step(lr)
            epoch_loss += sum(float(t.data) for t in terms)
        train_loss = epoch_loss / n_train

        val_loss = 0.0
        val_hits = 0
        for px, label in zip(val_images, val_labels):
            logits, _ = pipeline.forward_pixels(px / 255.0, mode="eval")
            val_loss += float(cross_entropy(logits, label).data)
            val_hits += int(np.argmax(logits.data) == label)
        val_loss /= len(val_images)
        val_acc = val_hits / len(val_images)

        history.append((epoch, lr, train_loss, val_loss, val_acc))
        write_log(log_path, history)

        if val_loss < best_val:
            best_val = val_loss
            ckpt = Checkpoint(
                weights={n: p.data.copy() for n, p in pipeline.named_parameters().items()},
                moment1={n: a.copy() for n, a in opt.m.items()},
                moment2={n: a.copy() for n, a in opt.v.items()},
                adam_t=opt.t,
                epoch=epoch + 1,
                best_val=best_val,
                norm_mean=pipeline.norm_mean,
                norm_std=pipeline.norm_std,
                config_text=config_text,
            )
            save_checkpoint(ckpt_path, ckpt)

    return TrainResult(history=history, best_val=best_val, steps=opt.t, checkpoint_path=ckpt_path)


def eval_logits(pipeline: AttentionPipeline, pixels: np.ndarray) -> np.ndarray:
    logits, _ = pipeline.forward_pixels(pixels, mode="eval")
    return logits.data.copy()
