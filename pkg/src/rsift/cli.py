"""Command-line pipeline: phantom -> target -> rsift -> label -> train -> predict -> report.

Every subcommand reads and writes standard file names under ``--out-dir`` so
the stages chain without extra flags, and records a run manifest in
``<out-dir>/manifests/<stage>.json``.

Exit codes: 0 success, 2 usage error, 3 invalid config, 4 unreadable or
malformed input, 5 stage failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .classifier import (
    ConvClassifier, NonFiniteGradientError, TrainConfig, predict, preprocess_all, train_cv,
)
from .density import (
    DegenerateSubsetError, DensityFilter, FilterParams, TargetDensityField, build_target_field,
)
from .engine import (
    Label, LabelSet, RsiftConfig, RsiftError, VoteLedger, assign_labels, default_subset_sizes,
    probe_min_subset_size, run_rsift, run_seed, sample_subset,
)
from .phantom import (
    REDUNDANT, LabeledTractogram, PhantomError, PhantomSpec, build_fp_experiment,
    build_redundancy_experiment, generate_ground_truth,
)
from .report import (
    ar_distribution, classification_report, length_crossover, length_histograms,
    vote_combination_table, write_histograms, write_json,
)
from .tractogram import (
    NormalizationRecord, TrackFileError, ensure_dir, file_digest, load_track_file,
    save_track_file,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_INPUT, EXIT_STAGE = 0, 2, 3, 4, 5
PREDICT_CHUNK = 1024

CONFIG_KEYS = {
    "phantom": {f.name for f in fields(PhantomSpec)} | {"experiment", "fp_total"},
    "target": {"n_bins"},
    "filter": {"eps_rel", "refit_every"},
    "rsift": {"subset_sizes", "tau", "max_retries"},
    "probe": {"fraction"},
    "train": {f.name for f in fields(TrainConfig)} | {"classes"},
    "predict": {"threshold"},
    "report": {"bin_width_mm", "exact_votes"},
}


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class StageError(RuntimeError):
    pass


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config and manifests


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config {path}: {e}") from e
    for section, values in raw.items():
        if section not in CONFIG_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(values) - CONFIG_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return raw


def pick(args, section, key, cli_value=None, default=None):
    """CLI flag, then config file, then default."""
    if cli_value is not None:
        return cli_value
    return args.config_data.get(section, {}).get(key, default)


class Stage:
    """Collects what a stage read, wrote and how long it took."""

    def __init__(self, args, name):
        self.args = args
        self.name = name
        self.inputs = {}
        self.outputs = {}
        self.settings = {}
        self.summary = {}
        self.start = time.perf_counter()

    def read(self, path):
        if not os.path.exists(path):
            raise InputError(f"{self.name}: missing input {path}")
        self.inputs[str(path)] = file_digest(path)
        return path

    def wrote(self, label, path):
        self.outputs[label] = str(path)
        return path

    def out(self, name):
        return os.path.join(self.args.out_dir, name)

    def progress(self, message):
        if not self.args.quiet:
            print(f"[{self.name}] {message}", file=sys.stderr, flush=True)

    def finish(self):
        manifest = {
            "stage": self.name,
            "version": __version__,
            "argv": self.args.argv,
            "cwd": os.getcwd(),
            "seed": self.args.seed,
            "threads": self.args.threads,
            "config": self.args.config_data,
            "settings": self.settings,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "output_hashes": {k: file_digest(v) for k, v in self.outputs.items()
                              if os.path.isfile(v)},
            "summary": self.summary,
            "timings": {"seconds": round(time.perf_counter() - self.start, 3)},
        }
        path = os.path.join(ensure_dir(os.path.join(self.args.out_dir, "manifests")),
                            f"{self.name}.json")
        write_json(manifest, path)
        if self.args.summary:
            print(json.dumps({"stage": self.name, "seed": self.args.seed, **self.summary},
                             sort_keys=True, default=_jsonable))
        return manifest


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _load_tractogram(stage, path):
    try:
        return load_track_file(stage.read(path))
    except TrackFileError as e:
        raise InputError(f"{path}: {e}") from e


def _filter_params(args) -> FilterParams:
    defaults = FilterParams()
    return FilterParams(
        eps_rel=float(pick(args, "filter", "eps_rel", getattr(args, "eps_rel", None), defaults.eps_rel)),
        refit_every=pick(args, "filter", "refit_every", None, defaults.refit_every),
    )


def _sidecar(track_path, suffix):
    base = track_path[:-4] if track_path.endswith(".tck") else track_path
    return f"{base}.{suffix}"


# ---------------------------------------------------------------------------
# Stages


def cmd_phantom(args):
    st = Stage(args, "phantom")
    section = dict(args.config_data.get("phantom", {}))
    if args.spec:
        spec_data = load_config_table(st.read(args.spec), "phantom")
        section.update(spec_data)
    experiment = args.experiment or section.pop("experiment", "fp")
    fp_total = args.fp_total if args.fp_total is not None else section.pop("fp_total", None)
    section.pop("experiment", None)
    section.pop("fp_total", None)
    if args.bundles is not None:
        section["n_bundles"] = args.bundles
    if args.per_bundle is not None:
        section["streamlines_per_bundle"] = args.per_bundle
    section.setdefault("rng_seed", args.seed)
    try:
        spec = PhantomSpec.from_dict(section)
    except (TypeError, PhantomError) as e:
        raise ConfigError(f"phantom spec: {e}") from e
    if experiment not in ("fp", "redundancy"):
        raise ConfigError(f"unknown experiment {experiment!r}")

    gt = generate_ground_truth(spec)
    st.progress(f"ground truth: {len(gt)} streamlines")
    if experiment == "fp":
        lab = build_fp_experiment(gt, np.random.default_rng([args.seed, 1]), fp_total)
    else:
        lab = build_redundancy_experiment(gt)
    out = args.out or st.out("phantom.tck")
    ensure_dir(os.path.dirname(os.path.abspath(out)))
    save_track_file(lab.tractogram, st.wrote("tractogram", out))
    lab.save_labels(st.wrote("labels", _sidecar(out, "labels.csv")))
    save_track_file(gt, st.wrote("ground_truth", _sidecar(out, "gt.tck")))
    st.settings = {"spec": spec.to_dict(), "experiment": experiment, "fp_total": fp_total}
    st.summary = {"ground_truth": len(gt), "streamlines": len(lab),
                  "labels": {k: lab.labels.count(k) for k in sorted(set(lab.labels))},
                  "notes": lab.notes}
    st.progress(f"{experiment} experiment: {len(lab)} streamlines -> {out}")
    return st.finish()


def load_config_table(path, section):
    """A phantom spec file may hold a [phantom] table or bare keys."""
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"spec {path}: {e}") from e
    data = raw.get(section, raw)
    unknown = set(data) - CONFIG_KEYS[section]
    if unknown:
        raise ConfigError(f"unknown key(s) in spec {path}: {', '.join(sorted(unknown))}")
    return data


def cmd_target(args):
    st = Stage(args, "target")
    ref_path = args.reference or st.out("phantom.gt.tck")
    ref = _load_tractogram(st, ref_path)
    n_bins = int(pick(args, "target", "n_bins", args.bins, 6))
    try:
        target = build_target_field(ref, n_bins)
    except ValueError as e:
        raise InputError(f"target: {e}") from e
    out = args.out or st.out("target.bin")
    target.save(st.wrote("target", out))
    st.settings = {"n_bins": n_bins}
    st.summary = {"reference_streamlines": len(ref), "nonzero_cells": int(np.count_nonzero(target.mu))}
    return st.finish()


def _load_filter(st, args):
    trk = _load_tractogram(st, args.tractogram or st.out("phantom.tck"))
    try:
        target = TargetDensityField.load(st.read(args.target or st.out("target.bin")))
    except ValueError as e:
        raise InputError(f"target field: {e}") from e
    st.progress(f"rasterizing {len(trk)} streamlines")
    try:
        return trk, DensityFilter.for_tractogram(trk, target)
    except ValueError as e:
        raise InputError(f"tractogram does not fit the target grid: {e}") from e


def cmd_filter(args):
    st = Stage(args, "filter")
    trk, filt = _load_filter(st, args)
    params = _filter_params(args)
    ids = None
    if args.subset_size is not None:
        if not 2 <= args.subset_size <= len(trk):
            raise ConfigError(f"subset size must lie in [2, {len(trk)}]")
        ids = sample_subset(len(trk), args.subset_size, run_seed(args.seed, args.subset_size, 0))
    outcome = filt.run(ids, params)
    out = args.out or st.out("filter.csv")
    outcome.save_csv(st.wrote("outcome", out))
    st.settings = {"filter": asdict(params), "subset_size": args.subset_size}
    st.summary = {"candidates": len(outcome.ids), "accepted": len(outcome.accepted),
                  "final_cost": outcome.final_cost, "stop_reason": outcome.stop_reason}
    return st.finish()


def cmd_probe(args):
    st = Stage(args, "probe-min-subset")
    trk, filt = _load_filter(st, args)
    params = _filter_params(args)
    fraction = float(pick(args, "probe", "fraction", args.fraction, 1.0))
    res = probe_min_subset_size(filt, params, seed=args.seed, fraction=fraction)
    out = args.out or st.out("probe.json")
    write_json({"n_min": res.n_min, "full_retained": res.full_retained, "fraction": fraction,
                "m": len(trk), "evaluations": {str(k): v for k, v in res.evaluations.items()}},
               st.wrote("probe", out))
    st.settings = {"filter": asdict(params), "fraction": fraction}
    st.summary = {"n_min": res.n_min, "m": len(trk), "full_retained": res.full_retained}
    st.progress(f"n_min = {res.n_min} of {len(trk)}")
    return st.finish()


def _subset_sizes(st, args, m, filt, params):
    sizes = pick(args, "rsift", "subset_sizes", args.subset_sizes)
    if sizes:
        return [int(s) for s in sizes]
    n_min = args.n_min
    if n_min is None:
        probe_path = args.probe or st.out("probe.json")
        if os.path.exists(probe_path):
            with open(st.read(probe_path)) as f:
                n_min = int(json.load(f)["n_min"])
        else:
            st.progress("no probe result found, probing the minimum subset size")
            n_min = probe_min_subset_size(filt, params, seed=args.seed).n_min
    return default_subset_sizes(m, n_min)


def cmd_rsift(args):
    st = Stage(args, "rsift")
    trk, filt = _load_filter(st, args)
    params = _filter_params(args)
    sizes = _subset_sizes(st, args, len(trk), filt, params)
    config = RsiftConfig(
        subset_sizes=sizes,
        tau=pick(args, "rsift", "tau", args.tau, 5),
        master_seed=args.seed,
        filter_params=params,
        max_retries=int(pick(args, "rsift", "max_retries", None, 3)),
        workers=args.threads,
    )
    try:
        config.validate(len(trk))
    except ValueError as e:
        raise ConfigError(f"rsift: {e}") from e
    st.progress(f"subset sizes {sizes}")
    every = max(1, sum(-(-config.tau * len(trk) // n) for n in sizes) // 20)

    def progress(done, total):
        if done % every == 0 or done == total:
            st.progress(f"{done}/{total} runs")

    ledger = run_rsift(filt, config, progress)
    votes = args.out or st.out("votes.csv")
    ledger.save_csv(st.wrote("votes", votes))
    runs_dir = os.path.join(os.path.dirname(os.path.abspath(votes)), "runs")
    ledger.save_manifests(runs_dir)
    st.wrote("run_manifests", runs_dir)
    st.settings = {"subset_sizes": sizes, "tau": config.tau, "filter": asdict(params),
                   "max_retries": config.max_retries}
    st.summary = {"m": ledger.m, "runs": len(ledger.runs), "failures": ledger.failures,
                  "unvoted": int(np.sum(ledger.votes() == 0))}
    return st.finish()


def cmd_label(args):
    st = Stage(args, "label")
    votes = args.votes or st.out("votes.csv")
    try:
        ledger = VoteLedger.load_csv(st.read(votes))
    except (KeyError, ValueError) as e:
        raise InputError(f"{votes}: {e}") from e
    labels = assign_labels(ledger)
    out = args.out or st.out("labels.csv")
    labels.save_csv(st.wrote("labels", out))
    st.summary = {"counts": labels.counts()}
    return st.finish()


def _read_labelset(st, path) -> LabelSet:
    try:
        return LabelSet.load_csv(st.read(path))
    except (KeyError, ValueError) as e:
        raise InputError(f"{path}: {e}") from e


def cmd_train(args):
    st = Stage(args, "train")
    trk = _load_tractogram(st, args.tractogram or st.out("phantom.tck"))
    labels = _read_labelset(st, args.labels or st.out("labels.csv"))
    if len(labels.labels) != len(trk):
        raise InputError("label table and tractogram differ in size")
    n_classes = int(pick(args, "train", "classes", args.classes, 2))
    section = {k: v for k, v in args.config_data.get("train", {}).items() if k != "classes"}
    if args.epochs is not None:
        section["epochs"] = args.epochs
    section.setdefault("seed", args.seed)
    try:
        cfg = TrainConfig.for_classes(n_classes, **section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from e

    if n_classes == 2:
        keep = np.flatnonzero((labels.labels == Label.PLAUSIBLE) | (labels.labels == Label.IMPLAUSIBLE))
        y = (labels.labels[keep] == Label.PLAUSIBLE).astype(np.int64)
    elif n_classes == 3:
        keep = np.flatnonzero(labels.labels != Label.UNVOTED)
        y = labels.labels[keep].astype(np.int64)
    else:
        raise ConfigError("classes must be 2 or 3")
    counts = np.bincount(y, minlength=n_classes)
    if counts.min() < cfg.folds:
        raise StageError(f"train: pseudo ground truth class counts {counts.tolist()}; every class "
                         f"needs at least {cfg.folds} streamlines for {cfg.folds}-fold CV")
    record = NormalizationRecord.fit(trk.streamlines)
    x = preprocess_all([trk[i] for i in keep], record)
    st.progress(f"training on {len(keep)} streamlines, class counts {counts.tolist()}")
    try:
        res = train_cv(x, y, cfg, log=st.progress)
    except ValueError as e:
        raise StageError(f"train: {e}") from e

    out = args.out or st.out("model.bin")
    metrics_path = _sidecar(out, "cv.csv") if not out.endswith(".bin") else out[:-4] + ".cv.csv"
    with open(st.wrote("cv_metrics", metrics_path), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        keys = [k for k in res.metrics[0] if k != "fold" and not isinstance(res.metrics[0][k], list)]
        w.writerow(["fold"] + keys + ["selected"])
        for m in res.metrics:
            w.writerow([m["fold"]] + [repr(float(m[k])) for k in keys]
                       + [int(m["fold"] == res.selected)])
    res.model.save(st.wrote("model", out), {
        "train_config": asdict(cfg), "n_classes": n_classes, "selected_fold": res.selected,
        "cv_metrics": res.metrics, "normalization": {"minimum": record.minimum,
                                                     "maximum": record.maximum},
        "seed": args.seed,
    })
    st.wrote("model_metadata", out + ".json")
    st.settings = {"train": asdict(cfg), "classes": n_classes}
    st.summary = {"samples": len(y), "selected_fold": res.selected,
                  "cv_mean_accuracy": res.mean("accuracy"),
                  "selected_metrics": res.metrics[res.selected]}
    return st.finish()


def _predict_chunk(job):
    path, x = job
    with threadpool_limits(1):
        model = ConvClassifier.load(path)
        return predict(model, x, chunk=PREDICT_CHUNK)


def cmd_predict(args):
    st = Stage(args, "predict")
    trk = _load_tractogram(st, args.tractogram or st.out("phantom.tck"))
    model_path = args.model or st.out("model.bin")
    try:
        model = ConvClassifier.load(st.read(model_path))
        with open(st.read(model_path + ".json")) as f:
            meta = json.load(f)
        norm = meta["normalization"]
    except (ValueError, KeyError) as e:
        raise InputError(f"{model_path}: {e}") from e
    record = NormalizationRecord(tuple(norm["minimum"]), tuple(norm["maximum"]))
    threshold = float(pick(args, "predict", "threshold", args.threshold, 0.5))
    x = preprocess_all(trk.streamlines, record)
    # fixed chunk boundaries keep results independent of the worker count
    chunks = [x[i:i + PREDICT_CHUNK] for i in range(0, len(x), PREDICT_CHUNK)]
    if args.threads > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(min(args.threads, len(chunks))) as pool:
            parts = list(pool.map(_predict_chunk, [(model_path, c) for c in chunks]))
    else:
        parts = [predict(model, c, chunk=PREDICT_CHUNK) for c in chunks]
    scores = np.concatenate([p.scores for p in parts]) if parts else np.zeros(0)
    feats = np.concatenate([p.features for p in parts]) if parts else np.zeros((0, model.arch.hidden))
    if model.binary:
        labels = (scores >= threshold).astype(np.int64)
    else:
        labels = np.argmax(scores, axis=1)

    out = args.out or st.out("predictions.csv")
    with open(st.wrote("predictions", out), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if model.binary:
            w.writerow(["id", "score", "label"])
            for i, (s, lab) in enumerate(zip(scores, labels)):
                w.writerow([i, repr(float(s)), int(lab)])
        else:
            w.writerow(["id"] + [f"score_{k}" for k in range(scores.shape[1])] + ["label"])
            for i, (s, lab) in enumerate(zip(scores, labels)):
                w.writerow([i] + [repr(float(v)) for v in s] + [int(lab)])
    if args.features:
        np.save(st.wrote("features", args.features), feats)
    st.settings = {"threshold": threshold}
    st.summary = {"streamlines": len(labels), "predicted_counts": np.bincount(
        labels, minlength=max(2, model.arch.n_out)).tolist()}
    return st.finish()


def _read_predictions(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    if rows and "score" in rows[0]:
        scores = np.array([float(r["score"]) for r in rows])
    else:
        cols = sorted((k for k in (rows[0] if rows else {}) if k.startswith("score_")),
                      key=lambda k: int(k.split("_")[1]))
        scores = np.array([[float(r[c]) for c in cols] for r in rows])
    return labels, scores


def cmd_report(args):
    st = Stage(args, "report")
    votes = args.votes or st.out("votes.csv")
    try:
        ledger = VoteLedger.load_csv(st.read(votes))
    except (KeyError, ValueError) as e:
        raise InputError(f"{votes}: {e}") from e
    out_dir = ensure_dir(args.report_dir or st.out("report"))
    bin_width = float(pick(args, "report", "bin_width_mm", args.bin_width, 10.0))
    exact_votes = int(pick(args, "report", "exact_votes", None, 5))

    table = ar_distribution(ledger)
    table.to_csv(st.wrote("ar_table", os.path.join(out_dir, "ar_table.csv")), corner="ar_bin")
    combos = vote_combination_table(ledger, exact_votes)
    combos.to_csv(st.wrote("vote_combinations", os.path.join(out_dir, "vote_combinations.csv")),
                  corner="votes")
    summary = {"ar_all": dict(zip(table.rows, table.column("all").tolist()))}

    truth_path = args.truth or _sidecar(args.tractogram or st.out("phantom.tck"), "labels.csv")
    if os.path.exists(truth_path):
        truth, mult, _ = LabeledTractogram.read_labels(st.read(truth_path))
        if len(truth) != ledger.m:
            raise InputError("truth table and vote ledger differ in size")
        if REDUNDANT in truth:
            groups = [f"x{m}" if lab == REDUNDANT else lab for lab, m in zip(truth, mult)]
        else:
            groups = truth
        by_truth = ar_distribution(ledger, groups=groups)
        by_truth.to_csv(st.wrote("ar_by_truth", os.path.join(out_dir, "ar_by_truth.csv")),
                        corner="ar_bin")
        summary["ar_by_truth"] = {c: dict(zip(by_truth.rows, by_truth.column(c).tolist()))
                                  for c in by_truth.cols}

    labels_path = args.labels or st.out("labels.csv")
    labels = _read_labelset(st, labels_path) if os.path.exists(labels_path) else None
    trk_path = args.tractogram or st.out("phantom.tck")
    lengths = _load_tractogram(st, trk_path).lengths() if os.path.exists(trk_path) else None
    if labels is not None:
        summary["label_counts"] = labels.counts()
    if labels is not None and lengths is not None:
        names = {int(lab): str(lab) for lab in Label}
        voted = labels.labels != Label.UNVOTED
        hist = length_histograms(lengths[voted], labels.labels[voted], bin_width, names)
        write_histograms(hist, st.wrote("length_by_label",
                                        os.path.join(out_dir, "length_by_label.csv")))

    pred_path = args.predictions or st.out("predictions.csv")
    if os.path.exists(pred_path):
        pred, scores = _read_predictions(st.read(pred_path))
        if lengths is not None and len(pred) == len(lengths):
            hist = length_histograms(lengths, pred, bin_width)
            write_histograms(hist, st.wrote("length_by_prediction",
                                            os.path.join(out_dir, "length_by_prediction.csv")))
            if scores.ndim == 1:
                summary["negative_majority_above_mm"] = length_crossover(lengths, pred == 1, bin_width)
        if labels is not None and len(pred) == len(labels.labels):
            summary["classification"] = _classification_summary(labels, pred, scores)
            write_json(summary["classification"],
                       st.wrote("classification", os.path.join(out_dir, "classification.json")))

    write_json(summary, st.wrote("summary", os.path.join(out_dir, "summary.json")))
    st.summary = summary
    return st.finish()


def _classification_summary(labels: LabelSet, pred, scores) -> dict:
    inconclusive = labels.labels == Label.INCONCLUSIVE
    if scores.ndim == 1:
        known = (labels.labels == Label.PLAUSIBLE) | (labels.labels == Label.IMPLAUSIBLE)
        truth = (labels.labels[known] == Label.PLAUSIBLE).astype(np.int64)
        rep = classification_report(truth, pred[known], n_classes=2)
        corr = classification_report(truth, pred[known], scores, labels.ar, inconclusive)
        rep["score_ar_correlation"] = corr["score_ar_correlation"]
        rep["score_ar_n"] = corr["score_ar_n"]
        return rep
    known = labels.labels != Label.UNVOTED
    rep = classification_report(labels.labels[known], pred[known], n_classes=scores.shape[1])
    return rep


STAGES = ("phantom", "target", "probe-min-subset", "rsift", "label", "train", "predict", "report")


def cmd_pipeline(args):
    """Run every stage in order with the standard file names."""
    argv_base = _global_argv(args)
    results = {}
    for stage in STAGES:
        extra = []
        if stage == "phantom" and args.experiment:
            extra = ["--experiment", args.experiment]
        results[stage] = main(argv_base + [stage] + extra, _nested=True)
        if results[stage] != EXIT_OK:
            return results[stage]
    return EXIT_OK


def _global_argv(args):
    out = ["--seed", str(args.seed), "--threads", str(args.threads), "--out-dir", args.out_dir]
    if args.config:
        out += ["--config", args.config]
    if args.quiet:
        out.append("--quiet")
    if args.summary:
        out.append("--summary")
    return out


def cmd_replay(args):
    with open(args.manifest) as f:
        manifest = json.load(f)
    cwd = os.getcwd()
    try:
        os.chdir(manifest["cwd"])
        return main(manifest["argv"], _nested=True)
    finally:
        os.chdir(cwd)


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--config", help="TOML config file with per-stage tables")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes for rsift and predict (default: all cores)")
    common.add_argument("--out-dir", default=".", help="directory for all outputs")
    common.add_argument("--summary", action="store_true",
                        help="print a one-line JSON summary of the stage on stdout")
    common.add_argument("--quiet", action="store_true", help="no progress output")

    parser = UsageParser(prog="rsift", description=__doc__.split("\n")[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("phantom", cmd_phantom, "generate a ground-truth phantom and an experiment tractogram")
    p.add_argument("--spec", help="TOML phantom spec ([phantom] table or bare keys)")
    p.add_argument("--experiment", choices=("fp", "redundancy"))
    p.add_argument("--out", help="experiment track file (default OUT/phantom.tck)")
    p.add_argument("--fp-total", type=int, help="total size of the false-positive experiment")
    p.add_argument("--bundles", type=int)
    p.add_argument("--per-bundle", type=int)

    p = add("target", cmd_target, "build the target density field from a reference tractogram")
    p.add_argument("--reference")
    p.add_argument("--bins", type=int, help="direction bins (default 6)")
    p.add_argument("--out")

    def filter_inputs(p):
        p.add_argument("--tractogram")
        p.add_argument("--target")
        p.add_argument("--eps-rel", type=float, help="relative convergence threshold")

    p = add("filter", cmd_filter, "filter one tractogram (or one random subset) to convergence")
    filter_inputs(p)
    p.add_argument("--subset-size", type=int)
    p.add_argument("--out")

    p = add("probe-min-subset", cmd_probe, "find the smallest subset size by bisection")
    filter_inputs(p)
    p.add_argument("--fraction", type=float)
    p.add_argument("--out")

    p = add("rsift", cmd_rsift, "filter random subsets repeatedly and count votes")
    filter_inputs(p)
    p.add_argument("--subset-sizes", type=int, nargs="+")
    p.add_argument("--n-min", type=int, help="smallest subset size for the default schedule")
    p.add_argument("--probe", help="probe result JSON (default OUT/probe.json)")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", help="vote ledger CSV (default OUT/votes.csv)")

    p = add("label", cmd_label, "assign plausible/implausible/inconclusive labels from votes")
    p.add_argument("--votes")
    p.add_argument("--out")

    p = add("train", cmd_train, "train the classifier on rSIFT labels with 5-fold CV")
    p.add_argument("--tractogram")
    p.add_argument("--labels")
    p.add_argument("--classes", type=int, choices=(2, 3))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")

    p = add("predict", cmd_predict, "score streamlines with a trained classifier")
    p.add_argument("--tractogram")
    p.add_argument("--model")
    p.add_argument("--threshold", type=float)
    p.add_argument("--features", help="write hidden dense activations to this .npy file")
    p.add_argument("--out")

    p = add("report", cmd_report, "write AR tables, histograms and classification metrics")
    p.add_argument("--votes")
    p.add_argument("--truth")
    p.add_argument("--labels")
    p.add_argument("--tractogram")
    p.add_argument("--predictions")
    p.add_argument("--bin-width", type=float)
    p.add_argument("--report-dir")

    p = add("pipeline", cmd_pipeline, "run all stages in order")
    p.add_argument("--experiment", choices=("fp", "redundancy"))

    p = add("replay", cmd_replay, "re-run a stage from its manifest")
    p.add_argument("manifest")
    return parser


def main(argv=None, _nested=False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    args.argv = argv
    if args.threads < 1:
        print("rsift: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.config_data = load_config(args.config)
        ensure_dir(args.out_dir)
        # single-threaded BLAS everywhere keeps results independent of --threads
        with threadpool_limits(1):
            result = args.func(args)
        return result if isinstance(result, int) else EXIT_OK
    except ConfigError as e:
        print(f"rsift: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as e:
        print(f"rsift: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (StageError, RsiftError, DegenerateSubsetError, PhantomError,
            NonFiniteGradientError) as e:
        print(f"rsift: stage failed: {e}", file=sys.stderr)
        return EXIT_STAGE


def entry() -> None:
    sys.exit(main())
