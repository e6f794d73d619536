"""Randomized repeated filtering over streamline subsets and vote accounting."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction

import numpy as np

from .density import DegenerateSubsetError, DensityFilter, FilterParams

log = logging.getLogger(__name__)


class Label(IntEnum):
    IMPLAUSIBLE = 0
    PLAUSIBLE = 1
    INCONCLUSIVE = 2
    UNVOTED = 3

    def __str__(self):
        return self.name.lower()


class RsiftError(RuntimeError):
    pass


def planned_runs(m: int, n: int, tau=5) -> int:
    """Number of subsets of size ``n`` so that ``k * n`` is about ``tau * m``."""
    if n <= 0:
        raise ValueError("subset size must be positive")
    if n > m or m <= 0 or tau <= 0:
        raise ValueError("need 0 < n <= m and tau > 0")
    return math.ceil(Fraction(tau) * m / n)


def run_seed(master_seed: int, n: int, run_index: int, attempt: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(n), int(run_index), int(attempt)])


def sample_subset(m: int, n: int, seed: np.random.SeedSequence) -> np.ndarray:
    """``n`` distinct ids drawn uniformly from ``range(m)``, sorted."""
    return np.sort(np.random.default_rng(seed).choice(m, size=n, replace=False))


def default_subset_sizes(m: int, n_min: int) -> list:
    sizes = {m, m // 2, m // 4, n_min}
    return sorted((s for s in sizes if 2 <= s <= m), reverse=True)


@dataclass
class RsiftConfig:
    subset_sizes: list
    tau: float = 5
    master_seed: int = 0
    filter_params: FilterParams = field(default_factory=FilterParams)
    max_retries: int = 3
    workers: int = 1

    def validate(self, m: int) -> None:
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not self.subset_sizes:
            raise ValueError("no subset sizes")
        for n in self.subset_sizes:
            if not 2 <= n <= m:
                raise ValueError(f"subset size {n} outside [2, {m}]")
        if len(set(self.subset_sizes)) != len(self.subset_sizes):
            raise ValueError("duplicate subset sizes")


@dataclass
class RunRecord:
    """One filter run: which streamlines it saw and which it kept."""

    n: int
    run_index: int
    attempt: int
    ids: np.ndarray
    accepted: np.ndarray  # bool, aligned with ids


@dataclass
class VoteLedger:
    """Positive/negative vote counts per streamline and subset size."""

    subset_sizes: list
    positive: np.ndarray  # (len(subset_sizes), M)
    negative: np.ndarray
    runs: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @classmethod
    def empty(cls, m: int, subset_sizes) -> "VoteLedger":
        shape = (len(subset_sizes), m)
        return cls(list(subset_sizes), np.zeros(shape, np.int64), np.zeros(shape, np.int64))

    @property
    def m(self) -> int:
        return self.positive.shape[1]

    def _row(self, n) -> int:
        return self.subset_sizes.index(n)

    def add(self, run: RunRecord) -> None:
        row = self._row(run.n)
        np.add.at(self.positive[row], run.ids[run.accepted], 1)
        np.add.at(self.negative[row], run.ids[~run.accepted], 1)
        self.runs.append(run)

    def counts(self, n=None) -> tuple[np.ndarray, np.ndarray]:
        if n is None:
            return self.positive.sum(axis=0), self.negative.sum(axis=0)
        row = self._row(n)
        return self.positive[row], self.negative[row]

    def votes(self, n=None) -> np.ndarray:
        p, q = self.counts(n)
        return p + q

    def ar(self, n=None) -> np.ndarray:
        """Acceptance rate per streamline; NaN where no votes were cast."""
        p, q = self.counts(n)
        total = p + q
        out = np.full(self.m, np.nan)
        np.divide(p, total, out=out, where=total > 0)
        return out

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "n", "P_n", "N_n"])
            for i in range(self.m):
                for row, n in enumerate(self.subset_sizes):
                    w.writerow([i, n, int(self.positive[row, i]), int(self.negative[row, i])])

    @classmethod
    def load_csv(cls, path) -> "VoteLedger":
        rows = []
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                rows.append((int(r["id"]), int(r["n"]), int(r["P_n"]), int(r["N_n"])))
        sizes = list(dict.fromkeys(n for _, n, _, _ in rows))
        m = max(i for i, _, _, _ in rows) + 1 if rows else 0
        ledger = cls.empty(m, sizes)
        for i, n, p, q in rows:
            ledger.positive[sizes.index(n), i] = p
            ledger.negative[sizes.index(n), i] = q
        return ledger

    def save_manifests(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for run in self.runs:
            path = os.path.join(directory, f"run_n{run.n}_i{run.run_index:04d}.csv")
            with open(path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["id", "verdict"])
                for i, ok in zip(run.ids, run.accepted):
                    w.writerow([int(i), "P" if ok else "N"])


def load_manifests(directory) -> list:
    runs = []
    for name in sorted(os.listdir(directory)):
        if not (name.startswith("run_n") and name.endswith(".csv")):
            continue
        n_part, i_part = name[len("run_n"):-len(".csv")].split("_i")
        ids, acc = [], []
        with open(os.path.join(directory, name), newline="") as f:
            for r in csv.DictReader(f):
                ids.append(int(r["id"]))
                acc.append(r["verdict"] == "P")
        runs.append(RunRecord(int(n_part), int(i_part), 0, np.array(ids, np.int64), np.array(acc, bool)))
    return runs


def replay_manifests(runs, m: int, subset_sizes) -> VoteLedger:
    """Recount votes from run manifests with plain loops."""
    sizes = list(subset_sizes)
    pos = [[0] * m for _ in sizes]
    neg = [[0] * m for _ in sizes]
    for run in runs:
        row = sizes.index(run.n)
        for i, ok in zip(run.ids.tolist(), run.accepted.tolist()):
            if ok:
                pos[row][i] += 1
            else:
                neg[row][i] += 1
    return VoteLedger(sizes, np.array(pos, np.int64).reshape(len(sizes), m),
                      np.array(neg, np.int64).reshape(len(sizes), m), list(runs))


# ---------------------------------------------------------------------------
# Running


_WORKER_FILTER: DensityFilter | None = None


def _init_worker(filt: DensityFilter) -> None:
    global _WORKER_FILTER
    _WORKER_FILTER = filt


def _execute(filt: DensityFilter, m: int, n: int, run_index: int, master_seed: int,
             params: FilterParams, max_retries: int):
    failures = []
    for attempt in range(max_retries + 1):
        ids = sample_subset(m, n, run_seed(master_seed, n, run_index, attempt))
        try:
            out = filt.run(ids, params)
        except DegenerateSubsetError as e:
            failures.append((n, run_index, attempt, str(e)))
            continue
        accepted = np.zeros(len(ids), dtype=bool)
        accepted[np.searchsorted(ids, out.accepted)] = True
        return RunRecord(n, run_index, attempt, ids, accepted), failures
    raise RsiftError(f"subset size {n}, run {run_index}: degenerate after {max_retries} retries")


def _execute_in_worker(args):
    return _execute(_WORKER_FILTER, *args)


def run_rsift(filt: DensityFilter, config: RsiftConfig, progress=None) -> VoteLedger:
    """Filter ``k`` random subsets for every subset size and count votes.

    Every run has its own seed derived from ``(master_seed, n, run_index)``,
    so the ledger does not depend on the number of workers.
    """
    m = len(filt)
    config.validate(m)
    tasks = []
    for n in config.subset_sizes:
        k = planned_runs(m, n, config.tau)
        tasks += [(m, n, i, config.master_seed, config.filter_params, config.max_retries)
                  for i in range(k)]
    ledger = VoteLedger.empty(m, config.subset_sizes)

    def collect(results):
        for done, (record, failures) in enumerate(results, 1):
            ledger.add(record)
            ledger.failures.extend(failures)
            if progress:
                progress(done, len(tasks))

    if config.workers <= 1:
        collect(_execute(filt, *t) for t in tasks)
    else:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(filt,)) as pool:
            # map preserves task order, so accumulation order is fixed
            collect(pool.map(_execute_in_worker, tasks, chunksize=max(1, len(tasks) // (4 * config.workers))))
    return ledger


def acceptance_rate(ledger: VoteLedger, sid: int, n=None) -> float | None:
    """AR of one streamline for subset size ``n`` (or all sizes); None if unvoted."""
    if not 0 <= sid < ledger.m:
        raise IndexError(f"unknown streamline id {sid}")
    p, q = ledger.counts(n)
    total = int(p[sid] + q[sid])
    return None if total == 0 else int(p[sid]) / total


@dataclass
class LabelSet:
    labels: np.ndarray  # Label values
    ar: np.ndarray  # overall AR, NaN when unvoted

    def ids(self, label: Label) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def counts(self) -> dict:
        return {str(lab): int(np.sum(self.labels == lab)) for lab in Label}

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "AR", "label"])
            for i, (lab, a) in enumerate(zip(self.labels, self.ar)):
                w.writerow([i, "" if np.isnan(a) else repr(float(a)), str(Label(lab))])

    @classmethod
    def load_csv(cls, path) -> "LabelSet":
        labels, ar = [], []
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                labels.append(Label[r["label"].upper()])
                ar.append(float(r["AR"]) if r["AR"] else np.nan)
        return cls(np.array(labels, dtype=np.int64), np.array(ar))


def labels_from_counts(p, q) -> LabelSet:
    p = np.asarray(p)
    q = np.asarray(q)
    total = p + q
    labels = np.full(len(p), int(Label.INCONCLUSIVE), dtype=np.int64)
    labels[total == 0] = Label.UNVOTED
    labels[(total > 0) & (q == 0)] = Label.PLAUSIBLE
    labels[(total > 0) & (p == 0)] = Label.IMPLAUSIBLE
    ar = np.full(len(p), np.nan)
    np.divide(p, total, out=ar, where=total > 0)
    return LabelSet(labels, ar)


def assign_labels(ledger: VoteLedger) -> LabelSet:
    return labels_from_counts(*ledger.counts())


# ---------------------------------------------------------------------------
# Minimum subset size


def bisect_smallest(predicate, lo: int, hi: int) -> int:
    """Smallest ``x`` in ``[lo, hi]`` with ``predicate(x)``, assuming monotonicity.

    ``predicate(hi)`` must hold.
    """
    while lo < hi:
        mid = (lo + hi) // 2
        if predicate(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass
class ProbeResult:
    n_min: int
    full_retained: int
    evaluations: dict


def probe_min_subset_size(filt: DensityFilter, params: FilterParams | None = None,
                          seed: int = 0, fraction: float = 1.0, lo: int = 2) -> ProbeResult:
    """Smallest subset size whose converged run keeps ``fraction`` of the full-run count.

    Candidate subsets are nested prefixes of one seeded permutation, so larger
    candidates contain smaller ones.
    """
    m = len(filt)
    full = len(filt.run(None, params).accepted)
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), m])).permutation(m)
    evaluations = {m: full}

    def retained(n):
        if n not in evaluations:
            try:
                evaluations[n] = len(filt.run(np.sort(perm[:n]), params).accepted)
            except DegenerateSubsetError:
                evaluations[n] = 0
        return evaluations[n]

    goal = fraction * full
    if retained(m) < goal:
        raise RsiftError("no subset size reaches the requested retention")
    n_min = bisect_smallest(lambda n: retained(n) >= goal, max(2, lo), m)
    return ProbeResult(n_min, full, dict(sorted(evaluations.items())))
