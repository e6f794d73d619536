"""Simplified SIFT: greedy streamline removal against a binned density target.

Track density is accumulated per (voxel, direction bin) cell as segment
length in mm. A filter run fits the scaled density ``lam * TD`` to the
target ``mu`` in the least-squares sense::

    C = sum_cells (lam * TD - mu) ** 2,   lam* = <mu, TD> / <TD, TD>

and repeatedly removes the streamline whose removal lowers ``C`` the most,
until the best reduction is negligible relative to the per-streamline cost.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .tractogram import Tractogram

_PHI = (1.0 + 5.0 ** 0.5) / 2.0


class DegenerateSubsetError(ValueError):
    """The subset has no density overlap with the target, so lam* is undefined."""


def bin_axes(n_bins: int = 6) -> np.ndarray:
    """Unit axes (one per antipodal pair) of the direction bins."""
    if n_bins == 3:
        return np.eye(3)
    if n_bins == 6:
        axes = np.array([[0, 1, _PHI], [0, 1, -_PHI], [1, _PHI, 0],
                         [1, -_PHI, 0], [_PHI, 0, 1], [-_PHI, 0, 1]], dtype=np.float64)
        return axes / np.linalg.norm(axes, axis=1, keepdims=True)
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    # Fibonacci points on the upper hemisphere
    i = np.arange(n_bins) + 0.5
    z = 1.0 - i / n_bins
    r = np.sqrt(1.0 - z * z)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def direction_bin(direction, axes) -> int:
    return int(np.argmax(np.abs(axes @ direction)))


def _split_at_faces(pts, voxel_size: float):
    """Cut every segment of a polyline at the voxel faces it crosses.

    Returns ``(segment, voxel, length)`` per piece: the index of the source
    segment, integer voxel coordinates and the piece length in mm.
    """
    a = pts[:-1] / voxel_size
    d = pts[1:] / voxel_size - a
    n_seg = len(a)
    seg_ids = [np.arange(n_seg), np.arange(n_seg)]
    ts = [np.zeros(n_seg), np.ones(n_seg)]
    lo = np.minimum(a, a + d)
    hi = np.maximum(a, a + d)
    first = np.floor(lo) + 1.0
    count = np.maximum(np.ceil(hi) - first, 0).astype(np.int64)
    count[d == 0.0] = 0
    for ax in range(3):
        k = count[:, ax]
        seg = np.repeat(np.arange(n_seg), k)
        offset = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
        plane = first[seg, ax] + offset
        seg_ids.append(seg)
        ts.append((plane - a[seg, ax]) / d[seg, ax])
    seg = np.concatenate(seg_ids)
    t = np.clip(np.concatenate(ts), 0.0, 1.0)
    order = np.lexsort((t, seg))
    seg, t = seg[order], t[order]
    same = seg[1:] == seg[:-1]
    seg_piece = seg[:-1][same]
    t0, t1 = t[:-1][same], t[1:][same]
    seg_len = np.linalg.norm(d, axis=1) * voxel_size
    lengths = (t1 - t0) * seg_len[seg_piece]
    keep = lengths > 0
    seg_piece, t0, t1, lengths = seg_piece[keep], t0[keep], t1[keep], lengths[keep]
    mid = a[seg_piece] + (0.5 * (t0 + t1))[:, None] * d[seg_piece]
    return seg_piece, np.floor(mid).astype(np.int64), lengths


def rasterize(streamline, grid_dims, voxel_size: float, axes) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell contributed length of one streamline.

    Each segment is clipped exactly against the voxel grid and every piece
    goes to the direction bin whose axis is most parallel to the segment.
    Cell index is ``flat_voxel * n_bins + bin``. Returns sorted unique cell
    indices and the summed lengths (mm) in each.
    """
    pts = np.asarray(streamline, dtype=np.float64)
    dims = np.asarray(grid_dims)
    if np.any(pts < 0) or np.any(pts > dims * voxel_size):
        raise ValueError("streamline point outside grid")
    axes = np.asarray(axes)
    seg, vox, lengths = _split_at_faces(pts, voxel_size)
    if len(seg) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    # points exactly on the far face belong to the last voxel
    vox = np.minimum(vox, dims - 1)
    bins = np.argmax(np.abs(np.diff(pts, axis=0) @ axes.T), axis=1)
    cells = np.ravel_multi_index(vox.T, dims) * len(axes) + bins[seg]
    uniq, inv = np.unique(cells, return_inverse=True)
    return uniq, np.bincount(inv, weights=lengths)


def contribution_matrix(tractogram: Tractogram, axes) -> sparse.csr_matrix:
    """Sparse ``(M, n_cells)`` matrix of per-cell segment lengths."""
    dims = tractogram.grid_dims
    n_cells = int(np.prod(dims)) * len(axes)
    indptr = [0]
    indices, data = [], []
    for s in tractogram.streamlines:
        c, ln = rasterize(s, dims, tractogram.voxel_size, axes)
        indices.append(c)
        data.append(ln)
        indptr.append(indptr[-1] + len(c))
    indices = np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64)
    data = np.concatenate(data) if data else np.zeros(0)
    return sparse.csr_matrix((data, indices, np.asarray(indptr)), shape=(len(tractogram), n_cells))


def track_density(contrib: sparse.csr_matrix, rows=None) -> np.ndarray:
    sub = contrib if rows is None else contrib[rows]
    return np.bincount(sub.indices, weights=sub.data, minlength=contrib.shape[1])


@dataclass
class TargetDensityField:
    grid_dims: tuple
    voxel_size: float
    axes: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.axes = np.asarray(self.axes, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        if self.mu.size != int(np.prod(self.grid_dims)) * len(self.axes):
            raise ValueError("mu size does not match grid and bins")
        if not np.all(np.isfinite(self.mu)) or np.any(self.mu < 0):
            raise ValueError("mu must be finite and non-negative")
        if not np.allclose(np.linalg.norm(self.axes, axis=1), 1.0):
            raise ValueError("bin axes must be unit vectors")

    @property
    def n_bins(self) -> int:
        return len(self.axes)

    def as_volume(self) -> np.ndarray:
        return self.mu.reshape(*self.grid_dims, self.n_bins)

    def contributions(self, tractogram: Tractogram) -> sparse.csr_matrix:
        if tuple(tractogram.grid_dims) != self.grid_dims or tractogram.voxel_size != self.voxel_size:
            raise ValueError("tractogram grid does not match the target field")
        return contribution_matrix(tractogram, self.axes)

    def save(self, path) -> None:
        header = "\n".join([
            "density field",
            "grid_dims: " + ",".join(map(str, self.grid_dims)),
            f"voxel_size: {self.voxel_size!r}",
            f"n_bins: {self.n_bins}",
            "axes: " + ",".join(repr(float(v)) for v in self.axes.ravel()),
            "END",
        ]) + "\n"
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(self.mu.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TargetDensityField":
        with open(path, "rb") as f:
            raw = f.read()
        end = raw.find(b"\nEND\n")
        if not raw.startswith(b"density field\n") or end < 0:
            raise ValueError("not a density field file")
        meta = dict(line.split(": ", 1) for line in raw[:end].decode("ascii").split("\n")[1:])
        n_bins = int(meta["n_bins"])
        axes = np.array([float(v) for v in meta["axes"].split(",")]).reshape(n_bins, 3)
        mu = np.frombuffer(raw[end + 5:], dtype="<f8").astype(np.float64)
        return cls(tuple(int(v) for v in meta["grid_dims"].split(",")),
                   float(meta["voxel_size"]), axes, mu)


def build_target_field(reference: Tractogram, n_bins: int = 6) -> TargetDensityField:
    """Target amounts from the reference track density, normalized to sum 1."""
    if len(reference) == 0:
        raise ValueError("empty reference tractogram")
    axes = bin_axes(n_bins)
    td = track_density(contribution_matrix(reference, axes))
    return TargetDensityField(reference.grid_dims, reference.voxel_size, axes, td / td.sum())


# ---------------------------------------------------------------------------
# Cost


def optimal_scale(td, mu) -> float:
    den = float(td @ td)
    num = float(mu @ td)
    if den == 0.0 or num <= 0.0:
        raise DegenerateSubsetError("track density does not overlap the target")
    return num / den


def cost(td, mu, lam: float | None = None) -> float:
    """Squared mismatch of ``lam * td`` and ``mu``; ``lam=None`` uses lam*."""
    td = np.asarray(td, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if td.shape != mu.shape:
        raise ValueError("shape mismatch")
    if lam is None:
        lam = optimal_scale(td, mu)
    r = lam * td - mu
    return float(r @ r)


def removal_delta(cells, values, td, mu, lam: float) -> float:
    """Exact cost change from subtracting one streamline's contributions."""
    r = lam * td[cells] - mu[cells]
    return float(np.sum(lam * values * (lam * values - 2.0 * r)))


# ---------------------------------------------------------------------------
# Filter


@dataclass
class FilterParams:
    # stop once the best removal gains less than eps_rel times the mean cost per streamline
    eps_rel: float = 0.15
    # lam* refit cadence in removals; None means max(1, subset_size // 100)
    refit_every: int | None = None
    target_count: int | None = None
    # recompute the cost from scratch at every removal (slow, for checks)
    verify: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "FilterParams":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FilterOutcome:
    ids: np.ndarray
    accepted: np.ndarray
    rejected: np.ndarray
    removal_order: list = field(default_factory=list)
    removal_deltas: list = field(default_factory=list)
    # (event, cost after event); event is "start", "remove" or "refit"
    cost_trace: list = field(default_factory=list)
    # |incremental delta - scratch delta| per removal when params.verify
    delta_errors: list = field(default_factory=list)
    final_cost: float = 0.0
    iterations: int = 0
    stop_reason: str = ""

    def verdicts(self) -> dict:
        out = {int(i): True for i in self.accepted}
        out.update({int(i): False for i in self.rejected})
        return out

    def save_csv(self, path) -> None:
        rank = {int(i): r for r, i in enumerate(self.removal_order)}
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "verdict", "removal_rank", "delta_cost"])
            for i in self.ids:
                i = int(i)
                if i in rank:
                    w.writerow([i, "rejected", rank[i], repr(self.removal_deltas[rank[i]])])
                else:
                    w.writerow([i, "accepted", "", ""])


class DensityFilter:
    """Filter runs over subsets of a fixed tractogram.

    Contributions are rasterized once; each run only slices rows.
    """

    def __init__(self, target: TargetDensityField, contrib: sparse.csr_matrix):
        if contrib.shape[1] != target.mu.size:
            raise ValueError("contribution matrix does not match the target field")
        self.target = target
        self.contrib = contrib.tocsr()
        self.sq_norms = np.asarray(self.contrib.multiply(self.contrib).sum(axis=1)).ravel()

    @classmethod
    def for_tractogram(cls, tractogram: Tractogram, target: TargetDensityField) -> "DensityFilter":
        return cls(target, target.contributions(tractogram))

    def __len__(self):
        return self.contrib.shape[0]

    def run(self, ids=None, params: FilterParams | None = None) -> FilterOutcome:
        params = params or FilterParams()
        ids = np.arange(len(self)) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(ids) == 0:
            raise ValueError("empty subset")
        mu = self.target.mu
        sub = self.contrib[ids]
        indptr, indices, data = sub.indptr, sub.indices, sub.data
        sq = self.sq_norms[ids]
        n = len(ids)
        refit_every = params.refit_every or max(1, n // 100)

        td = np.bincount(indices, weights=data, minlength=mu.size)
        lam = optimal_scale(td, mu)
        c = cost(td, mu, lam)
        out = FilterOutcome(ids=ids, accepted=ids, rejected=ids[:0])
        out.cost_trace.append(("start", c))
        present = np.ones(n, dtype=bool)
        count = n

        def rebuild_heap():
            r = lam * td - mu
            deltas = lam * lam * sq - 2.0 * lam * (sub @ r)
            heap = [(float(deltas[i]), i) for i in np.flatnonzero(present)]
            heapq.heapify(heap)
            return heap

        def delta_of(i):
            lo, hi = indptr[i], indptr[i + 1]
            return removal_delta(indices[lo:hi], data[lo:hi], td, mu, lam)

        heap = rebuild_heap()
        since_refit = 0
        while True:
            if count <= 1:
                out.stop_reason = "single streamline left"
                break
            if params.target_count is not None and count <= params.target_count:
                out.stop_reason = "target count"
                break
            if not heap:
                out.stop_reason = "exhausted"
                break
            _, i = heapq.heappop(heap)
            d = delta_of(i)
            # stale keys are lower bounds: removals only raise other deltas
            if heap and (d, i) > heap[0]:
                heapq.heappush(heap, (d, i))
                continue
            if d > -params.eps_rel * c / count:
                out.stop_reason = "converged"
                break
            lo, hi = indptr[i], indptr[i + 1]
            cells = indices[lo:hi]
            if params.verify:
                before = cost(td, mu, lam)
            td[cells] -= data[lo:hi]
            if params.verify:
                out.delta_errors.append(abs((cost(td, mu, lam) - before) - d))
            present[i] = False
            count -= 1
            c += d
            out.removal_order.append(int(ids[i]))
            out.removal_deltas.append(d)
            out.cost_trace.append(("remove", c))
            since_refit += 1
            if since_refit >= refit_every:
                since_refit = 0
                lam = optimal_scale(td, mu)
                c = cost(td, mu, lam)
                out.cost_trace.append(("refit", c))
                heap = rebuild_heap()
        out.iterations = len(out.removal_order)
        out.accepted = ids[present]
        out.rejected = ids[~present]
        out.final_cost = c
        return out


def sift_filter(subset: Tractogram, target: TargetDensityField,
                params: FilterParams | None = None) -> FilterOutcome:
    """Filter a standalone tractogram; ids in the outcome are its positions."""
    return DensityFilter.for_tractogram(subset, target).run(params=params)
