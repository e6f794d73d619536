"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The large phantom runs are shared through module fixtures, so the whole
suite takes several minutes on one core.
"""

import time

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from conftest import record
from oracles import gradient_check, nearest_centroid_accuracy, recount_epoch, smooth_batch
from rsift.classifier import (
    Architecture, ConvClassifier, TrainConfig, balanced_batches, preprocess_all, train_cv,
)
from rsift.cli import EXIT_OK, main
from rsift.density import DensityFilter, FilterParams, build_target_field
from rsift.engine import (
    Label, RsiftConfig, assign_labels, load_manifests, planned_runs,
    probe_min_subset_size, replay_manifests, run_rsift, run_seed, sample_subset,
)
from rsift.phantom import (
    FALSE_POSITIVE, TRUE_POSITIVE, PhantomSpec, build_fp_experiment, build_redundancy_experiment,
    generate_ground_truth, separable_toy,
)
from rsift.report import ar_bin
from rsift.tractogram import Tractogram, file_digest, load_track_file, save_track_file

SEED = 0
TOLERANCE_PP = 0.02


def halving_sizes(m):
    return [m, m // 2, m // 4, m // 8]


def inversions(values, non_decreasing):
    """Sizes of adjacent steps that go the wrong way."""
    steps = np.diff(np.asarray(values, dtype=np.float64))
    wrong = -steps if non_decreasing else steps
    return [float(s) for s in wrong if s > 0]


def trend_verdict(up, down):
    """``up`` must not decrease and ``down`` must not increase, allowing one
    adjacent-pair inversion of at most two percentage points in total."""
    bad = inversions(up, True) + inversions(down, False)
    return len(bad) <= 1 and all(b <= TOLERANCE_PP + 1e-12 for b in bad), bad


@pytest.fixture(scope="module")
def ground_truth():
    return generate_ground_truth(PhantomSpec(rng_seed=SEED))


@pytest.fixture(scope="module")
def target(ground_truth):
    return build_target_field(ground_truth)


@pytest.fixture(scope="module")
def fp_run(ground_truth, target):
    start = time.perf_counter()
    fp = build_fp_experiment(ground_truth, np.random.default_rng([SEED, 1]))
    filt = DensityFilter.for_tractogram(fp.tractogram, target)
    ledger = run_rsift(filt, RsiftConfig(halving_sizes(len(fp)), master_seed=SEED))
    return fp, ledger, time.perf_counter() - start


def test_c01_vote_bookkeeping(tmp_path):
    start = time.perf_counter()
    gt = generate_ground_truth(PhantomSpec(n_bundles=2, streamlines_per_bundle=34, rng_seed=SEED))
    fp = build_fp_experiment(gt, np.random.default_rng([SEED, 1]), target_total=500)
    filt = DensityFilter.for_tractogram(fp.tractogram, build_target_field(gt))
    n_min = probe_min_subset_size(filt, seed=SEED).n_min
    sizes = sorted({500, 250, 125, n_min}, reverse=True)
    ledger = run_rsift(filt, RsiftConfig(sizes, tau=5, master_seed=SEED))
    conserved = all(int(ledger.votes(n).sum()) == planned_runs(500, n, 5) * n for n in sizes)
    ledger.save_manifests(tmp_path / "runs")
    back = replay_manifests(load_manifests(tmp_path / "runs"), 500, sizes)
    replayed = (np.array_equal(back.positive, ledger.positive)
                and np.array_equal(back.negative, ledger.negative))
    elapsed = time.perf_counter() - start
    ok = conserved and replayed and elapsed < 120
    record(1, "vote bookkeeping", ok,
           f"SS={sizes}, conservation={conserved}, replay={replayed}, {elapsed:.1f}s (< 120s)")
    assert ok


def test_c02_k_formula():
    got = (planned_runs(10 ** 7, 10 ** 7, 5), planned_runs(10 ** 7, 2_500_000, 5))
    ok = got == (5, 20)
    record(2, "k formula", ok, f"k={got} for n=1e7, 2.5e6 (expected (5, 20))")
    assert ok


def test_c03_tp_fp_separation(ground_truth, fp_run):
    fp, ledger, elapsed = fp_run
    ar = ledger.ar()
    tp = fp.mask(TRUE_POSITIVE)
    fpm = fp.mask(FALSE_POSITIVE)
    voted = ~np.isnan(ar)
    a_tp, a_fp = ar[tp & voted], ar[fpm & voted]
    u = mannwhitneyu(a_tp, a_fp, alternative="two-sided").statistic
    auc = u / (len(a_tp) * len(a_fp))
    diff = a_tp.mean() - a_fp.mean()
    ok = auc >= 0.75 and diff >= 0.2 and elapsed < 600 and len(ground_truth) >= 1000
    record(3, "TP/FP separation", ok,
           f"GT={len(ground_truth)}, M={len(fp)}, AUC={auc:.3f} (>= 0.75), "
           f"mean AR TP-FP={diff:.3f} (>= 0.2), {elapsed:.0f}s (< 600s)")
    assert ok


def test_c04_redundancy_trend(ground_truth, target):
    red = build_redundancy_experiment(ground_truth)
    filt = DensityFilter.for_tractogram(red.tractogram, target)
    ledger = run_rsift(filt, RsiftConfig(halving_sizes(len(red)), master_seed=SEED))
    ar = ledger.ar()
    zero, full = [], []
    for k in (1, 2, 3, 5, 10, 49):
        a = ar[(red.multiplicity == k) & ~np.isnan(ar)]
        zero.append(float(np.mean(a == 0)))
        full.append(float(np.mean(a == 1)))
    ok, bad = trend_verdict(zero, full)
    record(4, "redundancy trend", ok,
           f"AR=0% by multiplicity {np.round(zero, 4).tolist()}, "
           f"AR=100% {np.round(full, 4).tolist()}, inversions {np.round(bad, 4).tolist()}")
    assert ok


def test_c05_subset_size_trend(fp_run):
    fp, ledger, _ = fp_run
    full, zero = [], []
    for n in ledger.subset_sizes:
        a = ledger.ar(n)
        a = a[~np.isnan(a)]
        full.append(float(np.mean(a == 1)))
        zero.append(float(np.mean(a == 0)))
    ok, bad = trend_verdict(full, zero)
    record(5, "subset-size trend", ok,
           f"SS={ledger.subset_sizes}, AR_n=100% {np.round(full, 4).tolist()}, "
           f"AR_n=0% {np.round(zero, 4).tolist()}, inversions {np.round(bad, 4).tolist()}")
    assert ok


def test_c06_filter_correctness():
    gt = generate_ground_truth(PhantomSpec(n_bundles=4, streamlines_per_bundle=25, rng_seed=SEED))
    target = build_target_field(gt)
    fp = build_fp_experiment(gt, np.random.default_rng([SEED, 1]), target_total=400)
    filt = DensityFilter.for_tractogram(fp.tractogram, target)
    params = FilterParams(verify=True)
    monotone, worst, runs = True, 0.0, 0
    for n in (400, 200, 100):
        for i in range(planned_runs(400, n)):
            out = filt.run(sample_subset(400, n, run_seed(SEED, n, i)), params)
            costs = np.array([c for _, c in out.cost_trace])
            monotone &= bool(np.all(np.diff(costs) <= 1e-12 * costs[:-1]))
            worst = max(worst, max(out.delta_errors, default=0.0))
            runs += 1
    fix = DensityFilter.for_tractogram(gt, target).run()
    fixpoint = len(fix.rejected) == 0
    stray = np.array([(1.0, 1.0, 1.0), (1.0, 1.0, 60.0)])
    excess = Tractogram(list(gt.streamlines) + [stray], gt.voxel_size, gt.grid_dims)
    first = DensityFilter.for_tractogram(excess, target).run().removal_order[:1] == [len(gt)]
    ok = monotone and worst < 1e-9 and fixpoint and first
    record(6, "filter correctness", ok,
           f"{runs} runs monotone={monotone}, max |dC - scratch|={worst:.2e} (< 1e-9), "
           f"fixpoint removes {len(fix.rejected)}, disjoint removed first={first}")
    assert ok


def test_c07_gradient_check():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for n_out, dropout in ((1, 0.0), (3, 0.5)):
            arch = Architecture(filters1=4, filters2=8, hidden=16, n_out=n_out, dropout=dropout)
            model = ConvClassifier(arch, seed=seed)
            x, y = smooth_batch(model, rng, n_classes=max(2, n_out))
            worst = max(worst, gradient_check(model, x, y, h=1e-5,
                                              dropout_seed=seed if dropout else None))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    record(7, "gradient check", ok,
           f"10 seeds x (sigmoid, softmax+dropout), max rel err={worst:.2e} (< 1e-4), "
           f"{elapsed:.1f}s (< 30s)")
    assert ok


def test_c08_classifier_performance(fp_run):
    fp, ledger, _ = fp_run
    labels = assign_labels(ledger)
    keep = np.flatnonzero((labels.labels == Label.PLAUSIBLE) | (labels.labels == Label.IMPLAUSIBLE))
    y = (labels.labels[keep] == Label.PLAUSIBLE).astype(np.int64)
    x = preprocess_all([fp.tractogram[i] for i in keep])
    pseudo = train_cv(x, y, TrainConfig(seed=SEED))
    acc_pseudo = pseudo.mean("accuracy")

    t, ty = separable_toy(500, np.random.default_rng(SEED))
    tx = preprocess_all(t.streamlines)
    toy = train_cv(tx, ty, TrainConfig(seed=SEED))
    acc_toy = toy.mean("accuracy")
    centroid = nearest_centroid_accuracy(tx, ty, toy.folds)
    ok = acc_pseudo >= 0.70 and acc_toy >= 0.95
    record(8, "classifier performance", ok,
           f"pseudo-GT ({int(y.sum())} plausible / {int((1 - y).sum())} implausible) "
           f"5-fold accuracy={acc_pseudo:.3f} (>= 0.70), toy={acc_toy:.3f} (>= 0.95, "
           f"nearest-centroid oracle {centroid:.3f})")
    assert ok


def test_c09_balanced_generator():
    results = []
    for major, minor in ((10, 1), (3, 2), (1, 1)):
        labels = np.r_[np.zeros(major * 37, int), np.ones(minor * 37, int)]
        labels = np.random.default_rng(major).permutation(labels)
        batches = balanced_batches(labels, 50, np.random.default_rng(SEED))
        results.append(recount_epoch(labels, batches, 50))
    ok = all(not r for r in results)
    record(9, "balanced generator", ok,
           "ratios 10:1, 3:2, 1:1 -> " + ", ".join("ok" if not r else "; ".join(r) for r in results))
    assert ok


PIPELINE_CONFIG = """
[phantom]
n_bundles = 4
streamlines_per_bundle = 50
fp_total = 800
"""

PIPELINE_FILES = [
    "phantom.tck", "phantom.labels.csv", "target.bin", "probe.json", "votes.csv",
    "labels.csv", "model.bin", "model.bin.json", "model.cv.csv", "predictions.csv",
    "report/ar_table.csv", "report/ar_by_truth.csv", "report/vote_combinations.csv",
    "report/length_by_label.csv", "report/length_by_prediction.csv",
    "report/classification.json", "report/summary.json",
]


def test_c10_determinism(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(PIPELINE_CONFIG)
    digests = []
    for name, threads in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / name
        code = main(["--seed", str(SEED), "--threads", str(threads), "--config", str(cfg),
                     "--out-dir", str(out), "--quiet", "pipeline"])
        assert code == EXIT_OK
        digests.append({f: file_digest(out / f) for f in PIPELINE_FILES})
    ok = digests[0] == digests[1] == digests[2]
    differing = sorted(f for f in PIPELINE_FILES if len({d[f] for d in digests}) > 1)
    record(10, "determinism", ok,
           f"{len(PIPELINE_FILES)} outputs identical across 2 runs and threads 1/4"
           if ok else f"differing outputs: {differing}")
    assert ok


def test_c11_format_roundtrip(tmp_path):
    rng = np.random.default_rng(SEED)
    streamlines = [rng.uniform(-50, 150, (rng.integers(2, 60), 3)) for _ in range(1000)]
    a, b = tmp_path / "a.tck", tmp_path / "b.tck"
    save_track_file(Tractogram(streamlines), a)
    save_track_file(load_track_file(a), b)
    ok = a.read_bytes() == b.read_bytes()
    record(11, "format round-trip", ok, f"1000 streamlines, {a.stat().st_size} bytes, identical={ok}")
    assert ok


def test_c12_ar_bins():
    got = ar_bin([0.0, 0.2, 0.200001, 1.0]).tolist()
    ok = got == [0, 1, 2, 6]
    names = ["0%", "(0,20]", "(20,40]", "(40,60]", "(60,80]", "(80,100)", "100%"]
    record(12, "AR-bin rules", ok, f"{{0, 0.2, 0.200001, 1.0}} -> {[names[i] for i in got]}")
    assert ok
