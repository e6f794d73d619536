from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsift.engine import VoteLedger
from rsift.report import (
    AR_BINS, Table, ar_bin, ar_bin_exact, ar_distribution, classification_report,
    confusion_matrix, length_crossover, length_histograms, pearson, vote_combination_table,
    write_histograms,
)


def reference_bin(p, total):
    """Bin by exact rational comparison against the half-open interval rule."""
    ar = Fraction(p, total)
    if ar == 0:
        return 0
    if ar == 1:
        return 6
    for i in range(1, 6):
        if Fraction(i - 1, 5) < ar <= Fraction(i, 5):
            return i


def test_bin_examples():
    assert list(ar_bin([0.0, 0.2, 0.200001, 1.0])) == [0, 1, 2, 6]
    assert [AR_BINS[i] for i in ar_bin([0.0, 0.2, 0.200001, 1.0])] == \
        ["0%", "(0,20]", "(20,40]", "100%"]
    assert list(ar_bin([0.8, 0.81, 0.9999])) == [4, 5, 5]


def test_bin_rejects_out_of_range():
    with pytest.raises(ValueError):
        ar_bin([1.2])
    with pytest.raises(ValueError):
        ar_bin([np.nan])


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 500).flatmap(lambda t: st.tuples(st.integers(0, t), st.just(t))))
def test_exact_bins_match_rational_reference(pt):
    p, t = pt
    assert ar_bin_exact([p], [t])[0] == reference_bin(p, t)


def test_exact_bins_on_boundaries():
    # 1/5, 2/5, ... computed as integer ratios must not drift into the next bin
    p = np.array([1, 2, 3, 4, 2, 4, 6, 8])
    t = np.array([5, 5, 5, 5, 10, 10, 10, 10])
    assert list(ar_bin_exact(p, t)) == [1, 2, 3, 4, 1, 2, 3, 4]


def _ledger(p, q, sizes=(10,)):
    led = VoteLedger.empty(len(p[0]) if np.ndim(p) == 2 else len(p), list(sizes))
    led.positive[:] = np.atleast_2d(p)
    led.negative[:] = np.atleast_2d(q)
    return led


def test_ar_distribution_recount():
    rng = np.random.default_rng(0)
    p = rng.integers(0, 6, (2, 300))
    q = rng.integers(0, 6, (2, 300))
    led = _ledger(p, q, (100, 50))
    table = ar_distribution(led)
    assert table.cols == ["100", "50", "all"]
    for row, col in enumerate(["100", "50"]):
        counts = [0] * 7
        voted = 0
        for a, b in zip(p[row], q[row]):
            if a + b:
                counts[reference_bin(int(a), int(a + b))] += 1
                voted += 1
        np.testing.assert_allclose(table.column(col), np.array(counts) / voted)
    for c in table.cols:
        assert abs(table.column(c).sum() - 1) < 1e-9


def test_ar_distribution_groups():
    led = _ledger([5, 0, 2, 3], [0, 5, 3, 0])
    table = ar_distribution(led, groups=["TP", "FP", "FP", "TP"])
    assert table.cols == ["FP", "TP"]
    assert table.cell("100%", "TP") == 1.0
    assert table.cell("0%", "FP") == 0.5 and table.cell("(20,40]", "FP") == 0.5


def test_ar_distribution_excludes_unvoted():
    led = _ledger([1, 0], [0, 0])
    assert ar_distribution(led).cell("100%", "10") == 1.0


def test_vote_combinations():
    led = _ledger([5, 0, 2, 2, 4, 3], [0, 5, 3, 3, 0, 3])
    t = vote_combination_table(led, 5)
    assert t.rows[0] == "P:0,N:5" and t.rows[-1] == "P:5,N:0"
    # 4-vote and 6-vote streamlines are excluded
    assert t.cell("P:5,N:0", 10) == 0.25
    assert t.cell("P:2,N:3", 10) == 0.5
    assert abs(t.column(10).sum() - 1) < 1e-12


def test_table_csv(tmp_path):
    t = Table(["a", "b"], [1, "x"], [[0.1, 0.2], [0.3, 1 / 3]])
    t.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "row,1,x"
    assert float(lines[2].split(",")[2]) == 1 / 3


def test_histograms_single_label():
    lengths = np.array([41.0, 55.0, 59.0, 72.0])
    h = length_histograms(lengths, np.ones(4, int), 10.0)
    assert list(h["edges"]) == [40.0, 50.0, 60.0, 70.0, 80.0]
    assert list(h["counts"][1]) == [1, 2, 0, 1]


def test_histograms_sum_to_total(tmp_path):
    rng = np.random.default_rng(1)
    lengths = rng.uniform(40, 200, 500)
    labels = rng.integers(0, 3, 500)
    h = length_histograms(lengths, labels, 7.5, names={0: "neg", 1: "pos", 2: "inc"})
    assert sum(c.sum() for c in h["counts"].values()) == 500
    write_histograms(h, tmp_path / "h.csv")
    head = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert head == "bin_lo,bin_hi,neg,pos,inc"


def test_crossover_on_bimodal_fixture():
    rng = np.random.default_rng(2)
    short = rng.uniform(40, 80, 400)
    long = rng.uniform(80, 160, 400)
    lengths = np.r_[short, long]
    positive = np.r_[np.ones(400, bool), np.zeros(400, bool)]
    x = length_crossover(lengths, positive, 10.0)

    # direct scan: smallest bin edge above which every nonempty bin is negative-dominated
    edges = np.arange(40, 170, 10)
    best = None
    for e in edges[::-1]:
        sel = (lengths >= e) & (lengths < e + 10)
        if not sel.any():
            continue
        if (~positive[sel]).sum() > positive[sel].sum():
            best = float(e)
        else:
            break
    assert x == best == 80.0


def test_crossover_none():
    assert length_crossover([50.0, 60.0], [True, True]) is None


def test_confusion_orientation():
    cm = confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2)
    # rows predicted, columns truth
    assert cm.tolist() == [[1, 1], [1, 2]]


def test_report_perfect_and_inverted():
    truth = np.array([0, 1, 1, 0, 1])
    r = classification_report(truth, truth)
    assert r["accuracy"] == 1.0 and r["sensitivity"] == 1.0 and r["specificity"] == 1.0
    assert r["confusion_normalized"] == [[1.0, 0.0], [0.0, 1.0]]
    r = classification_report(truth, 1 - truth)
    assert r["accuracy"] == 0.0 and r["confusion_normalized"] == [[0.0, 1.0], [1.0, 0.0]]


def test_report_columns_sum_to_one():
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 3, 200)
    pred = rng.integers(0, 3, 200)
    r = classification_report(truth, pred, n_classes=3)
    np.testing.assert_allclose(np.sum(r["confusion_normalized"], axis=0), 1.0)
    assert len(r["class_rates"]) == 3


def test_score_ar_correlation():
    ar = np.array([0.1, 0.3, 0.5, 0.7, np.nan, 1.0])
    scores = 2 * np.nan_to_num(ar) + 0.1
    inconclusive = np.array([True, True, True, True, True, False])
    r = classification_report([0] * 6, [0] * 6, scores, ar, inconclusive)
    assert r["score_ar_correlation"] == pytest.approx(1.0)
    assert r["score_ar_n"] == 4
    assert np.isnan(pearson([1.0, 1.0], [0.0, 2.0]))
