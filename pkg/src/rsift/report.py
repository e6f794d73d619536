"""Aggregate tables: AR bins, vote combinations, length histograms, metrics.

All writers produce plain CSV with a header row; floats are written with
``repr`` so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .engine import VoteLedger

AR_BINS = ("0%", "(0,20]", "(20,40]", "(40,60]", "(60,80]", "(80,100)", "100%")


def ar_bin_exact(p, total) -> np.ndarray:
    """Bin index from integer vote counts, without rounding.

    Inner bins exclude their lower and include their upper bound; 0 and 1
    get their own bins, so (80,100) excludes 100.
    """
    p = np.asarray(p, dtype=np.int64)
    total = np.asarray(total, dtype=np.int64)
    out = np.zeros(p.shape, dtype=np.int64)
    inner = (p > 0) & (p < total)
    # smallest i in 1..5 with p/total <= i/5
    out[inner] = -((-5 * p[inner]) // total[inner])
    out[(p == total) & (total > 0)] = 6
    return out


def ar_bin(ar) -> np.ndarray:
    """Bin index of float acceptance rates (same rule as ``ar_bin_exact``)."""
    ar = np.atleast_1d(np.asarray(ar, dtype=np.float64))
    if np.any(np.isnan(ar)) or np.any((ar < 0) | (ar > 1)):
        raise ValueError("AR must lie in [0, 1]")
    out = np.searchsorted(np.array([0.2, 0.4, 0.6, 0.8]), ar, side="left") + 1
    out[ar == 0.0] = 0
    out[ar == 1.0] = 6
    return out


class Table:
    """Rows x columns of floats with labels; written as CSV."""

    def __init__(self, row_labels, col_labels, values):
        self.rows = list(row_labels)
        self.cols = [str(c) for c in col_labels]
        self.values = np.asarray(values, dtype=np.float64).reshape(len(self.rows), len(self.cols))

    def column(self, label) -> np.ndarray:
        return self.values[:, self.cols.index(str(label))]

    def cell(self, row, col) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(str(col))])

    def to_csv(self, path, corner="row") -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([corner] + self.cols)
            for r, vals in zip(self.rows, self.values):
                w.writerow([r] + [repr(float(v)) for v in vals])

    def __repr__(self):
        width = max(len(r) for r in self.rows)
        lines = [" " * width + "  " + "  ".join(f"{c:>10}" for c in self.cols)]
        for r, vals in zip(self.rows, self.values):
            lines.append(f"{r:>{width}}  " + "  ".join(f"{v:10.4f}" for v in vals))
        return "\n".join(lines)


def _bin_fractions(p, total) -> np.ndarray:
    voted = total > 0
    if not voted.any():
        return np.zeros(len(AR_BINS))
    counts = np.bincount(ar_bin_exact(p[voted], total[voted]), minlength=len(AR_BINS))
    return counts / voted.sum()


def ar_distribution(ledger: VoteLedger, groups=None) -> Table:
    """Fraction of voted streamlines per AR bin.

    Without ``groups``: one column per subset size plus ``all`` (overall AR).
    With ``groups`` (one key per streamline): one column per group, using
    overall AR. Unvoted streamlines are excluded from every column.
    """
    cols, values = [], []
    if groups is None:
        for n in ledger.subset_sizes:
            p, q = ledger.counts(n)
            cols.append(n)
            values.append(_bin_fractions(p, p + q))
        p, q = ledger.counts()
        cols.append("all")
        values.append(_bin_fractions(p, p + q))
    else:
        groups = np.asarray(groups)
        p, q = ledger.counts()
        for g in _ordered_unique(groups):
            sel = groups == g
            cols.append(g)
            values.append(_bin_fractions(p[sel], (p + q)[sel]))
    return Table(AR_BINS, cols, np.array(values).T)


def _ordered_unique(values):
    u = np.unique(values)
    return list(u)


def vote_combination_table(ledger: VoteLedger, exact_votes: int = 5) -> Table:
    """Fractions of streamlines per (P, N) split among those with exactly ``exact_votes``."""
    rows = [f"P:{i},N:{exact_votes - i}" for i in range(exact_votes + 1)]
    cols, values = [], []
    for n in ledger.subset_sizes:
        p, q = ledger.counts(n)
        sel = (p + q) == exact_votes
        counts = np.bincount(p[sel], minlength=exact_votes + 1)
        cols.append(n)
        values.append(counts / sel.sum() if sel.any() else np.zeros(exact_votes + 1))
    return Table(rows, cols, np.array(values).T)


def length_histograms(lengths, labels, bin_width_mm: float = 10.0, names=None) -> dict:
    """Per-label histograms of streamline length on a shared grid of bins.

    Returns ``{"edges": ..., "counts": {label: counts}}``.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    labels = np.asarray(labels)
    if len(lengths) != len(labels):
        raise ValueError("lengths and labels differ in size")
    lo = np.floor(lengths.min() / bin_width_mm) * bin_width_mm if len(lengths) else 0.0
    hi = np.floor(lengths.max() / bin_width_mm) * bin_width_mm + bin_width_mm if len(lengths) else bin_width_mm
    edges = np.arange(lo, hi + bin_width_mm / 2, bin_width_mm)
    counts = {}
    for lab in _ordered_unique(labels):
        name = names.get(lab, lab) if names else lab
        counts[name] = np.histogram(lengths[labels == lab], bins=edges)[0]
    return {"edges": edges, "counts": counts}


def length_crossover(lengths, positive, bin_width_mm: float = 10.0) -> float | None:
    """Left edge of the first bin from which negatives outnumber positives in
    every later nonempty bin; None if there is no such bin."""
    lengths = np.asarray(lengths, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    h = length_histograms(lengths, positive, bin_width_mm)
    pos = h["counts"].get(True, np.zeros(len(h["edges"]) - 1, dtype=np.int64))
    neg = h["counts"].get(False, np.zeros(len(h["edges"]) - 1, dtype=np.int64))
    answer = None
    for i in range(len(pos) - 1, -1, -1):
        if pos[i] + neg[i] == 0:
            continue
        if neg[i] > pos[i]:
            answer = float(h["edges"][i])
        else:
            break
    return answer


def write_histograms(hist: dict, path) -> None:
    names = list(hist["counts"])
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + [str(n) for n in names])
        for i in range(len(hist["edges"]) - 1):
            w.writerow([repr(float(hist["edges"][i])), repr(float(hist["edges"][i + 1]))]
                       + [int(hist["counts"][n][i]) for n in names])


def confusion_matrix(truth, predicted, n_classes: int) -> np.ndarray:
    """Counts with rows = predicted class and columns = true class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(predicted), np.asarray(truth)), 1)
    return cm


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def classification_report(truth, predicted, scores=None, ar=None, inconclusive=None,
                          n_classes: int | None = None) -> dict:
    """Accuracy, column-normalized confusion matrix and per-class rates.

    When ``scores`` and ``ar`` are given, also reports the Pearson
    correlation between them over the ``inconclusive`` mask.
    """
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.shape != predicted.shape:
        raise ValueError("truth and predictions differ in length")
    if n_classes is None:
        n_classes = int(max(truth.max(initial=0), predicted.max(initial=0))) + 1
        n_classes = max(n_classes, 2)
    cm = confusion_matrix(truth, predicted, n_classes)
    col = cm.sum(axis=0, keepdims=True)
    norm = np.divide(cm, col, out=np.full(cm.shape, np.nan), where=col > 0)
    out = {
        "n": int(len(truth)),
        "accuracy": float(np.mean(truth == predicted)) if len(truth) else float("nan"),
        "confusion_counts": cm.tolist(),
        "confusion_normalized": norm.tolist(),
        "class_rates": [float(norm[c, c]) for c in range(n_classes)],
    }
    if n_classes == 2:
        out["sensitivity"] = out["class_rates"][1]
        out["specificity"] = out["class_rates"][0]
    if scores is not None and ar is not None:
        scores = np.asarray(scores, dtype=np.float64)
        ar = np.asarray(ar, dtype=np.float64)
        sel = np.ones(len(ar), bool) if inconclusive is None else np.asarray(inconclusive, bool)
        sel &= ~np.isnan(ar)
        out["score_ar_correlation"] = pearson(scores[sel], ar[sel])
        out["score_ar_n"] = int(sel.sum())
    return out


def write_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_default)
        f.write("\n")


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
