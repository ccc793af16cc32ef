"""Command-line pipeline: generate -> train -> eval, for both models.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint/corpus
incompatibility, 1 anything else. All output paths are relative to
--out. GRIDATTN_THREADS caps worker counts (used by corpus generation;
model code is single-process by contract).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from gridattn import baseline as baseline_mod
from gridattn import config as cfgmod
from gridattn import datagen, metrics, trainer
from gridattn.errors import CheckpointMismatchError, ConfigError, DataError
from gridattn.labels import CLASS_NAMES, NUM_CLASSES
from gridattn.model import predict_pixels
from gridattn.tiler import load_image, remove_background


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("GRIDATTN_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"GRIDATTN_THREADS must be an integer, got {raw!r}") from None


# -- generate -----------------------------------------------------------


def cmd_generate(args) -> int:
    spec = datagen.load_spec(args.spec) if args.spec else datagen.CorpusSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    records = datagen.generate(spec, args.out, workers=worker_count())
    print(f"corpus written to {args.out} ({len(records)} images)")
    header = f"{'split':<8}" + "".join(f"{n:>20}" for n in CLASS_NAMES) + f"{'total':>8}"
    print(header)
    for split in datagen.SPLITS:
        counts = [0] * NUM_CLASSES
        for rec in records:
            if rec.split == split:
                counts[rec.label] += 1
        print(f"{split:<8}" + "".join(f"{c:>20}" for c in counts) + f"{sum(counts):>8}")
    return 0


# -- train --------------------------------------------------------------


def _load_run_config(path) -> cfgmod.RunConfig:
    return cfgmod.RunConfig.load(path) if path else cfgmod.RunConfig()


def _write_resolved_config(run_cfg: cfgmod.RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(run_cfg.to_text())


def _train_attention(records, args, run_cfg) -> int:
    pipeline = trainer.build_pipeline(run_cfg)
    resume = trainer.load_checkpoint(args.resume) if args.resume else None
    tcfg = trainer.train_config_from(run_cfg)
    result = trainer.train(records, args.corpus, pipeline, tcfg, run_cfg, args.out, resume=resume)
    for epoch, lr, tl, vl, va in result.history:
        print(f"epoch {epoch}: lr={lr:.3e} train_loss={tl:.4f} val_loss={vl:.4f} val_acc={va:.3f}")
    print(f"best val loss {result.best_val:.4f}; checkpoint at {result.checkpoint_path}")
    return 0


def _image_entries(records, corpus_dir, split):
    for rec in records:
        if rec.split != split:
            continue
        px = remove_background(load_image(os.path.join(corpus_dir, rec.path)))
        yield px, rec.label, rec.group_id, rec.boxes


def _train_baseline(records, args, run_cfg) -> int:
    crop_size = run_cfg.get("baseline", "crop_size")
    stride = run_cfg.get("baseline", "stride")
    seed = run_cfg.get("train", "seed")

    train_crops = baseline_mod.harvest_crops(_image_entries(records, args.corpus, "train"), crop_size, stride)
    val_crops = baseline_mod.harvest_crops(_image_entries(records, args.corpus, "val"), crop_size, stride)
    cap = run_cfg.get("baseline", "max_crops_per_class")
    sample_rng = trainer.rng_stream(seed, 15)
    train_crops = baseline_mod.subsample_per_class(train_crops, cap, sample_rng)
    val_crops = baseline_mod.subsample_per_class(val_crops, cap, sample_rng)

    classifier = baseline_mod.CropClassifier.create(cfgmod.extractor_config(run_cfg), seed=seed)
    mean, std = trainer.tissue_stats(
        (px for px, _l, _g, _b in _image_entries(records, args.corpus, "train")),
        run_cfg.get("data", "white_threshold"),
    )
    classifier.set_normalization(mean, std)

    history = baseline_mod.train_crop_classifier(
        classifier,
        train_crops,
        val_crops,
        epochs=run_cfg.get("baseline", "epochs"),
        batch_size=run_cfg.get("baseline", "batch_size"),
        lr=run_cfg.get("baseline", "lr"),
        seed=seed,
    )
    with open(os.path.join(args.out, "train_log.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,val_acc\n")
        for epoch, tl, vl, va in history:
            fh.write(f"{epoch},{tl!r},{vl!r},{va!r}\n")
    for epoch, tl, vl, va in history:
        print(f"epoch {epoch}: crop_train_loss={tl:.4f} crop_val_loss={vl:.4f} crop_val_acc={va:.3f}")

    val_items = []
    for px, label, _g, _boxes in _image_entries(records, args.corpus, "val"):
        preds, _scores = classifier.predict_windows(px, crop_size, stride)
        val_items.append((label, preds))
    heuristic = baseline_mod.search_thresholds(
        val_items,
        cfgmod.parse_int_list(run_cfg.get("baseline", "count_grid")),
        cfgmod.parse_float_list(run_cfg.get("baseline", "conf_grid")),
    )
    baseline_mod.write_heuristic(heuristic, args.out)
    ckpt = baseline_mod.checkpoint_from_classifier(
        classifier, heuristic, run_cfg, epoch=len(history)
    )
    path = os.path.join(args.out, "checkpoint.bin")
    trainer.save_checkpoint(path, ckpt)
    print(f"chosen heuristic: t={heuristic.count_thresholds} q={heuristic.conf_thresholds}")
    print(f"checkpoint at {path}")
    return 0


def cmd_train(args) -> int:
    run_cfg = _load_run_config(args.config)
    run_cfg.set("run", "model", args.model)
    records = datagen.load_index(args.corpus)
    trainer.check_group_splits(records)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(run_cfg, args.out)
    if args.model == "attention":
        return _train_attention(records, args, run_cfg)
    return _train_baseline(records, args, run_cfg)


# -- eval ---------------------------------------------------------------


def _check_corpus_compat(run_cfg: cfgmod.RunConfig, corpus_dir):
    spec_path = os.path.join(corpus_dir, "spec.txt")
    if not os.path.exists(spec_path):
        return
    spec = datagen.load_spec(spec_path)
    want = run_cfg.get("data", "cell_size")
    if spec.cell_size != want:
        raise CheckpointMismatchError(
            f"checkpoint expects cell_size {want} but corpus was generated for "
            f"cell_size {spec.cell_size}"
        )


def _eval_attention(ckpt, records, args, run_cfg) -> int:
    pipeline = trainer.pipeline_from_checkpoint(ckpt)
    dump = args.dump_attention or run_cfg.get("eval", "dump_attention")
    y_true, y_pred, probs = [], [], []
    loc_rows = []
    started = time.perf_counter()
    count = 0
    for rec in records:
        if rec.split != args.split:
            continue
        px = remove_background(load_image(os.path.join(args.corpus, rec.path)))
        pred, p, maps = predict_pixels(pipeline, px)
        y_true.append(rec.label)
        y_pred.append(pred)
        probs.append(p)
        count += 1
        if dump:
            out_dir = os.path.join(args.out, "attention")
            metrics.export_attention(maps, out_dir, rec.id)
            if rec.boxes:
                lesion = metrics.cells_over_boxes(
                    [b for b in rec.boxes if b.cls == rec.label],
                    px.shape[:2],
                    pipeline.cell_size,
                    pipeline.overlap,
                )
                for head, alpha in enumerate(maps):
                    score = metrics.localization_score(alpha, lesion)
                    loc_rows.append((rec.id, rec.label, pred, head, score))
    elapsed = time.perf_counter() - started
    if count == 0:
        raise DataError(f"no images in split {args.split!r}")
    print(f"eval: {count} images in {elapsed:.2f}s ({elapsed / count:.3f}s/image)")

    _write_eval_outputs(y_true, y_pred, probs, args.out, "attention model")
    if dump and loc_rows:
        with open(os.path.join(args.out, "localization.csv"), "w", encoding="utf-8") as fh:
            fh.write("id,label,pred,head,score\n")
            for rid, label, pred, head, score in loc_rows:
                text = "" if score is None else repr(score)
                fh.write(f"{rid},{CLASS_NAMES[label]},{CLASS_NAMES[pred]},{head},{text}\n")
    return 0


def _eval_baseline(ckpt, records, args, run_cfg) -> int:
    classifier, heuristic, _ = baseline_mod.classifier_from_checkpoint(ckpt)
    crop_size = run_cfg.get("baseline", "crop_size")
    stride = run_cfg.get("baseline", "stride")
    y_true, y_pred, probs = [], [], []
    started = time.perf_counter()
    count = 0
    for rec in records:
        if rec.split != args.split:
            continue
        px = remove_background(load_image(os.path.join(args.corpus, rec.path)))
        preds, scores = classifier.predict_windows(px, crop_size, stride)
        y_true.append(rec.label)
        y_pred.append(baseline_mod.aggregate(preds, heuristic))
        probs.append(scores)
        count += 1
    elapsed = time.perf_counter() - started
    if count == 0:
        raise DataError(f"no images in split {args.split!r}")
    print(f"eval: {count} images in {elapsed:.2f}s ({elapsed / count:.3f}s/image)")
    _write_eval_outputs(y_true, y_pred, probs, args.out, "sliding-window baseline")
    return 0


def _write_eval_outputs(y_true, y_pred, probs, out_dir, title):
    report = metrics.build_report(y_true, y_pred, np.asarray(probs))
    metrics.write_metrics_csv(report, os.path.join(out_dir, "metrics.csv"))
    cm = metrics.confusion_matrix(y_true, y_pred)
    metrics.write_confusion_csv(cm, os.path.join(out_dir, "confusion.csv"))
    for c, curve in enumerate(report.rocs):
        if not curve.undefined:
            metrics.write_roc_csv(curve, os.path.join(out_dir, f"roc_{CLASS_NAMES[c]}.csv"))
    text = metrics.format_report_text(report, title)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")


def cmd_eval(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    run_cfg = cfgmod.RunConfig.parse_text(ckpt.config_text)
    _check_corpus_compat(run_cfg, args.corpus)
    records = datagen.load_index(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    _write_resolved_config(run_cfg, args.out)
    if run_cfg.get("run", "model") == "baseline":
        return _eval_baseline(ckpt, records, args, run_cfg)
    return _eval_attention(ckpt, records, args, run_cfg)


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridattn",
        description="grid-attention tissue image classification pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic corpus")
    gen.add_argument("--spec", help="corpus spec file ([corpus] section)")
    gen.add_argument("--out", required=True, help="corpus output directory")
    gen.add_argument("--seed", type=int, help="override the spec's seed")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train a model on a corpus")
    tr.add_argument("--config", help="run config file (defaults when omitted)")
    tr.add_argument("--corpus", required=True, help="corpus directory with index.csv")
    tr.add_argument("--model", choices=("attention", "baseline"), default="attention")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--resume", help="checkpoint to continue from (attention only)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--out", required=True)
    ev.add_argument("--dump-attention", action="store_true", dest="dump_attention")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # pragma: no cover - unexpected faults
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
