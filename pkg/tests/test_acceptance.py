"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

The synthetic end-to-end criteria share a module-scoped default corpus
and three trained runs; expect several minutes of CPU for the full file.
Run with `pytest tests/test_acceptance.py -v -s` to watch the lines.
"""

import itertools
import time

import numpy as np
import pytest

from gridattn import cli, metrics
from gridattn.attention import AttentionHead, attend, classify, init_attention
from gridattn.autodiff import Tensor, backward, cross_entropy, softmax2d
from gridattn.baseline import (
    Heuristic,
    aggregate,
    classifier_from_checkpoint,
    search_thresholds,
)
from gridattn.config import RunConfig
from gridattn.datagen import CorpusSpec, generate, load_index
from gridattn.extractor import ExtractorConfig, extract, init_extractor
from gridattn.labels import ADENOCARCINOMA, BE_NO_DYSPLASIA, BE_WITH_DYSPLASIA, NORMAL
from gridattn.model import predict_pixels
from gridattn.tiler import CellGrid, load_image, remove_background
from gridattn.trainer import (
    Checkpoint,
    build_pipeline,
    load_checkpoint,
    pipeline_from_checkpoint,
    save_checkpoint,
    train,
    train_config_from,
)
from helpers import FD_EPS, numeric_grad, rel_err


def criterion(number, ok, detail):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------
# shared fixtures: default corpus + three trained runs
# ---------------------------------------------------------------------

CORPUS_SEED = 11
TRAIN_EPOCHS = 15
TRAIN_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def default_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_corpus")
    records = generate(CorpusSpec(seed=CORPUS_SEED), out, workers=2)
    return out, records


@pytest.fixture(scope="module")
def test_images(default_corpus):
    corpus_dir, records = default_corpus
    recs = [r for r in records if r.split == "test"]
    pixels = [remove_background(load_image(f"{corpus_dir}/{r.path}")) for r in recs]
    return recs, pixels


@pytest.fixture(scope="module")
def trained_runs(default_corpus, test_images, tmp_path_factory):
    corpus_dir, records = default_corpus
    test_recs, test_px = test_images
    runs = []
    for seed in TRAIN_SEEDS:
        cfg = RunConfig()
        cfg.set("train", "epochs", TRAIN_EPOCHS)
        cfg.set("train", "seed", seed)
        out = tmp_path_factory.mktemp(f"run_seed{seed}")
        started = time.perf_counter()
        result = train(records, corpus_dir, build_pipeline(cfg), train_config_from(cfg), cfg, out)
        train_seconds = time.perf_counter() - started
        pipeline = pipeline_from_checkpoint(load_checkpoint(result.checkpoint_path))
        y_true, y_pred, probs = [], [], []
        for rec, px in zip(test_recs, test_px):
            pred, p, _maps = predict_pixels(pipeline, px)
            y_true.append(rec.label)
            y_pred.append(pred)
            probs.append(p)
        report = metrics.build_report(y_true, y_pred, np.asarray(probs))
        runs.append(
            {
                "seed": seed,
                "result": result,
                "pipeline": pipeline,
                "report": report,
                "train_seconds": train_seconds,
            }
        )
    return runs


def median_run(runs):
    accs = [r["report"].mean_accuracy for r in runs]
    order = np.argsort(accs)
    return runs[order[len(order) // 2]]


# ---------------------------------------------------------------------
# criterion 1: gradient oracle on the full model
# ---------------------------------------------------------------------


def test_criterion_1_gradient_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(123)
    ext_cfg = ExtractorConfig(feature_size=4, stages=((6, 3, 2), (8, 3, 2), (4, 3, 2)))
    params = init_extractor(ext_cfg, seed=9)
    module = init_attention(feature_size=4, num_heads=2, spatial=3, hidden=6, seed=9)
    cells = rng.random((2, 2, 8, 8, 3))
    grid = CellGrid(
        cells=cells,
        tissue_mask=np.ones((2, 2), dtype=bool),
        cell_size=8,
        overlap=0,
        source_shape=(16, 16),
    )
    label = 2

    def forward():
        fg = extract(grid, params, ext_cfg)
        logits, _ = classify(fg, module, mode="eval")
        return cross_entropy(logits, label)

    all_params = dict(params)
    all_params.update(module.named_parameters())
    for p in all_params.values():
        p.zero_grad()
    backward(forward())
    worst = 0.0
    n_checked = 0
    for name, p in all_params.items():
        assert p.grad is not None, f"no gradient for {name}"
        num = numeric_grad(forward, p, eps=FD_EPS)
        worst = max(worst, rel_err(p.grad, num))
        n_checked += p.size
    elapsed = time.perf_counter() - started
    criterion(
        1,
        worst < 1e-4 and elapsed < 30.0,
        f"{n_checked} parameter gradients vs central differences, worst rel err "
        f"{worst:.2e} (< 1e-4), runtime {elapsed:.1f}s (< 30s)",
    )


# ---------------------------------------------------------------------
# criterion 2: attention equation unit suite
# ---------------------------------------------------------------------


def test_criterion_2_attention_equations():
    rng = np.random.default_rng(7)
    # normalization over 1000 random grids
    worst_sum = 0.0
    for _ in range(1000):
        r, c = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        a = softmax2d(Tensor(rng.normal(scale=4.0, size=(r, c)))).data
        worst_sum = max(worst_sum, abs(a.sum() - 1.0))
        assert np.all(a > 0)
    # shift invariance of the map under constant value offsets
    worst_shift = 0.0
    for _ in range(200):
        v = rng.normal(scale=3.0, size=(4, 5))
        offset = float(rng.uniform(-100, 100))
        a0 = softmax2d(Tensor(v)).data
        a1 = softmax2d(Tensor(v + offset)).data
        worst_shift = max(worst_shift, float(np.max(np.abs(a1 - a0))))
    # selection-limit convergence of the pooled vector
    base = rng.uniform(-1, 1, size=(4, 3, 3))
    kernel = np.zeros((4, 1, 1))
    kernel[0, 0, 0] = 1.0
    head = AttentionHead(kernel=Tensor(kernel), bias=Tensor(np.array(0.0)))
    dists = []
    for bump in (10.0, 20.0, 50.0):
        u = base.copy()
        u[0, 1, 1] = bump
        _, z = attend(Tensor(u), head)
        dists.append(float(np.max(np.abs(z.data - u[:, 1, 1]))))
    selection_ok = dists[0] > dists[1] > dists[2] and dists[2] < 1e-6
    # d=1 permutation invariance of the pooled vector
    worst_perm = 0.0
    for _ in range(50):
        k, r, c = 5, 3, 4
        u = rng.normal(size=(k, r, c))
        h1 = AttentionHead(
            kernel=Tensor(rng.normal(size=(k, 1, 1))), bias=Tensor(np.array(0.2))
        )
        _, z = attend(Tensor(u), h1)
        perm = rng.permutation(r * c)
        up = np.empty((k, r * c))
        up[:, perm] = u.reshape(k, r * c)
        _, zp = attend(Tensor(up.reshape(k, r, c)), h1)
        worst_perm = max(worst_perm, float(np.max(np.abs(zp.data - z.data))))
    ok = worst_sum < 1e-9 and worst_shift < 1e-9 and selection_ok and worst_perm < 1e-9
    criterion(
        2,
        ok,
        f"softmax sum err {worst_sum:.1e}, shift err {worst_shift:.1e}, "
        f"selection dists {dists[0]:.1e}>{dists[1]:.1e}>{dists[2]:.1e}, "
        f"d=1 permutation err {worst_perm:.1e} (all within stated tolerances)",
    )


# ---------------------------------------------------------------------
# criterion 3: published metric-table arithmetic
# ---------------------------------------------------------------------

PRINTED_ROWS = [
    ("sliding window", "normal", 0.60, 0.62, 0.61),
    ("sliding window", "be_no_dysplasia", 0.87, 0.43, 0.58),
    ("sliding window", "be_with_dysplasia", 0.16, 0.36, 0.22),
    ("sliding window", "adenocarcinoma", 0.65, 0.52, 0.58),
    ("attention", "normal", 0.68, 0.69, 0.68),
    ("attention", "be_no_dysplasia", 0.68, 0.77, 0.72),
    ("attention", "be_with_dysplasia", 0.50, 0.21, 0.30),
    ("attention", "adenocarcinoma", 0.63, 0.71, 0.67),
]


def test_criterion_3_metric_table_arithmetic():
    worst = 0.0
    for _model, _cls, precision, recall, printed in PRINTED_ROWS:
        worst = max(worst, abs(metrics.f1_score(precision, recall) - printed))
    criterion(
        3,
        worst <= 0.005,
        f"8 published F1 rows recomputed from precision/recall, worst gap {worst:.4f} (<= 0.005)",
    )


# ---------------------------------------------------------------------
# criterion 4: flexible grid contract
# ---------------------------------------------------------------------


def test_criterion_4_flexible_grid(trained_runs):
    module = median_run(trained_runs)["pipeline"].module
    k = module.feature_size
    rng = np.random.default_rng(17)
    checked = 0
    for r in range(1, 9):
        for c in range(1, 9):
            u = Tensor(rng.normal(size=(k, r, c)))
            logits, maps = classify(u, module, mode="eval")
            assert logits.data.shape == (4,)
            assert np.all(np.isfinite(logits.data))
            assert maps[0].data.shape == (r, c)
            checked += 1
    criterion(4, checked == 64, f"one trained module produced valid logits for all {checked} grid shapes in [1,8]^2")


# ---------------------------------------------------------------------
# criterion 5: synthetic end-to-end performance
# ---------------------------------------------------------------------


def test_criterion_5_synthetic_end_to_end(trained_runs):
    accs = sorted(r["report"].mean_accuracy for r in trained_runs)
    f1s = sorted(r["report"].mean_f1 for r in trained_runs)
    times = [r["train_seconds"] for r in trained_runs]
    med_acc, med_f1 = accs[1], f1s[1]
    ok = med_acc >= 0.85 and med_f1 >= 0.55 and max(times) <= 20 * 60
    criterion(
        5,
        ok,
        f"median over {len(trained_runs)} seeds: mean OVR accuracy {med_acc:.3f} (>= 0.85), "
        f"mean F1 {med_f1:.3f} (>= 0.55), slowest run {max(times):.0f}s (<= 1200s)",
    )


# ---------------------------------------------------------------------
# criterion 6: attention localization
# ---------------------------------------------------------------------


def test_criterion_6_attention_localization(trained_runs, test_images):
    run = median_run(trained_runs)
    pipeline = run["pipeline"]
    test_recs, test_px = test_images
    best_scores = []
    for rec, px in zip(test_recs, test_px):
        if rec.label == NORMAL:
            continue
        pred, _p, maps = predict_pixels(pipeline, px)
        if pred != rec.label:
            continue
        lesion = metrics.cells_over_boxes(
            [b for b in rec.boxes if b.cls == rec.label],
            px.shape[:2],
            pipeline.cell_size,
            pipeline.overlap,
        )
        scores = [metrics.localization_score(m, lesion) for m in maps]
        scores = [s for s in scores if s is not None]
        if scores:
            best_scores.append(max(scores))
    med = float(np.median(best_scores))
    criterion(
        6,
        len(best_scores) > 0 and med >= 2.0,
        f"best-head localization over {len(best_scores)} correctly classified abnormal "
        f"images: median {med:.1f} (>= 2.0)",
    )


# ---------------------------------------------------------------------
# criterion 7: comparison harness
# ---------------------------------------------------------------------


def test_criterion_7_comparison_harness(default_corpus, test_images, trained_runs, tmp_path):
    corpus_dir, _records = default_corpus
    out = tmp_path / "baseline_run"
    rc = cli.main(
        ["train", "--corpus", str(corpus_dir), "--model", "baseline", "--out", str(out)]
    )
    assert rc == 0
    assert (out / "heuristic.txt").exists()
    classifier, heuristic, run_cfg = classifier_from_checkpoint(
        load_checkpoint(out / "checkpoint.bin")
    )
    crop_size = run_cfg.get("baseline", "crop_size")
    stride = run_cfg.get("baseline", "stride")
    test_recs, test_px = test_images
    y_true, y_pred, probs = [], [], []
    for rec, px in zip(test_recs, test_px):
        preds, scores = classifier.predict_windows(px, crop_size, stride)
        y_true.append(rec.label)
        y_pred.append(aggregate(preds, heuristic))
        probs.append(scores)
    baseline_report = metrics.build_report(y_true, y_pred, np.asarray(probs))
    attention_report = median_run(trained_runs)["report"]
    table = metrics.format_paired_table(
        baseline_report, attention_report, "sliding window", "attention model"
    )
    table_path = tmp_path / "paired_metrics.txt"
    table_path.write_text(table)
    lines = table.splitlines()
    shaped = len(lines) == 1 + 16 + 4 and lines[1].split()[0] == "normal" and "mean" in lines[-4]
    criterion(
        7,
        shaped and table_path.exists(),
        f"baseline trained, threshold search chose t={heuristic.count_thresholds} "
        f"q={heuristic.conf_thresholds}, paired table emitted "
        f"(baseline mean F1 {baseline_report.mean_f1:.2f}, attention {attention_report.mean_f1:.2f}; "
        f"no relative gate)",
    )
    print(table)


# ---------------------------------------------------------------------
# criterion 8: baseline heuristic oracles
# ---------------------------------------------------------------------


def oracle_aggregate(windows, ts, qs):
    for cls in (3, 2, 1):
        n = sum(1 for c, p in windows if c == cls and p >= qs[cls - 1])
        if n >= ts[cls - 1]:
            return cls
    return 0


def oracle_search(val_items, t_grid, q_grid):
    def mean_f1(labels, preds):
        out = []
        for c in range(4):
            tp = sum(1 for t, p in zip(labels, preds) if t == c and p == c)
            fp = sum(1 for t, p in zip(labels, preds) if t != c and p == c)
            fn = sum(1 for t, p in zip(labels, preds) if t == c and p != c)
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            out.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        return sum(out) / 4.0

    labels = [label for label, _ in val_items]
    best = None
    for ts in itertools.product(sorted(t_grid), repeat=3):
        for qs in itertools.product(sorted(q_grid), repeat=3):
            preds = [oracle_aggregate(w, ts, qs) for _, w in val_items]
            score = mean_f1(labels, preds)
            if best is None or score > best[0] + 1e-12:
                best = (score, ts, qs)
    return best[1], best[2]


def test_criterion_8_heuristic_oracles():
    rng = np.random.default_rng(23)
    # aggregate vs enumeration on random instances
    agg_checked = 0
    for _ in range(300):
        windows = [(int(rng.integers(0, 4)), float(np.round(rng.random(), 2))) for _ in range(8)]
        ts = tuple(int(t) for t in rng.integers(1, 4, size=3))
        qs = tuple(float(q) for q in rng.choice([0.3, 0.5, 0.7, 0.9], size=3))
        h = Heuristic(count_thresholds=ts, conf_thresholds=qs)
        assert aggregate(windows, h) == oracle_aggregate(windows, ts, qs)
        agg_checked += 1
    # crafted 3-image validation instance, exact oracle agreement
    items = [
        (ADENOCARCINOMA, [(ADENOCARCINOMA, 0.92), (ADENOCARCINOMA, 0.55), (NORMAL, 0.8)]),
        (
            BE_WITH_DYSPLASIA,
            [(BE_WITH_DYSPLASIA, 0.7), (BE_WITH_DYSPLASIA, 0.65), (ADENOCARCINOMA, 0.5)],
        ),
        (NORMAL, [(NORMAL, 0.9), (ADENOCARCINOMA, 0.52), (BE_NO_DYSPLASIA, 0.61)]),
    ]
    t_grid, q_grid = [1, 2], [0.5, 0.6, 0.9]
    h = search_thresholds(items, t_grid, q_grid)
    ts, qs = oracle_search(items, t_grid, q_grid)
    search_ok = h.count_thresholds == ts and h.conf_thresholds == qs
    criterion(
        8,
        search_ok,
        f"aggregate matched enumeration on {agg_checked} random instances; grid search "
        f"matched the exhaustive oracle exactly (t={ts}, q={qs})",
    )


# ---------------------------------------------------------------------
# criterion 9: determinism and persistence
# ---------------------------------------------------------------------


def small_run_config(seed=0):
    cfg = RunConfig()
    cfg.set("extractor", "feature_size", 8)
    cfg.set("extractor", "stages", "6:3:2,8:3:2")
    cfg.set("attention", "heads", 2)
    cfg.set("attention", "hidden", 8)
    cfg.set("train", "epochs", 3)
    cfg.set("train", "seed", seed)
    return cfg


def test_criterion_9_determinism_and_persistence(tmp_path):
    spec = CorpusSpec(
        seed=41,
        counts={"train": (3, 2, 2, 2), "val": (2, 1, 1, 1), "test": (1, 1, 1, 1)},
        image_size=(64, 96),
        lesion_size=(40, 56),
    )
    generate(spec, tmp_path / "c1")
    generate(spec, tmp_path / "c2")
    corpus_same = (tmp_path / "c1/index.csv").read_bytes() == (tmp_path / "c2/index.csv").read_bytes()
    for img in sorted((tmp_path / "c1/images").iterdir()):
        corpus_same = corpus_same and img.read_bytes() == (tmp_path / "c2/images" / img.name).read_bytes()

    records = load_index(tmp_path / "c1")
    outs = []
    for name in ("r1", "r2"):
        cfg = small_run_config()
        out = tmp_path / name
        train(records, tmp_path / "c1", build_pipeline(cfg), train_config_from(cfg), cfg, out)
        outs.append(out)
    log_same = (outs[0] / "train_log.csv").read_bytes() == (outs[1] / "train_log.csv").read_bytes()
    ckpt_same = (outs[0] / "checkpoint.bin").read_bytes() == (outs[1] / "checkpoint.bin").read_bytes()

    # save -> load round trip preserves eval logits bit-exactly
    ckpt = load_checkpoint(outs[0] / "checkpoint.bin")
    pipe_a = pipeline_from_checkpoint(ckpt)
    px = remove_background(load_image(f"{tmp_path/'c1'}/{records[0].path}"))
    logits_a = pipe_a.forward_pixels(px)[0].data
    save_checkpoint(
        tmp_path / "resaved.bin",
        Checkpoint(
            weights={n: p.data.copy() for n, p in pipe_a.named_parameters().items()},
            moment1=ckpt.moment1,
            moment2=ckpt.moment2,
            adam_t=ckpt.adam_t,
            epoch=ckpt.epoch,
            best_val=ckpt.best_val,
            norm_mean=pipe_a.norm_mean,
            norm_std=pipe_a.norm_std,
            config_text=ckpt.config_text,
        ),
    )
    pipe_b = pipeline_from_checkpoint(load_checkpoint(tmp_path / "resaved.bin"))
    logits_b = pipe_b.forward_pixels(px)[0].data
    logits_same = np.array_equal(logits_a, logits_b)

    criterion(
        9,
        corpus_same and log_same and ckpt_same and logits_same,
        f"corpus bytes identical: {corpus_same}; training log identical: {log_same}; "
        f"checkpoint identical: {ckpt_same}; round-trip logits bit-exact: {logits_same}",
    )
