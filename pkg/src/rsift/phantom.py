"""Synthetic bundle phantoms and the two labeled experiment datasets.

The ground truth is a set of smooth bundles (cubic Bezier centerlines with
per-streamline offsets). From it we build

* a false-positive experiment: half the streamlines kept as true positives,
  the other half rigidly rotated about their centroid, plus rotated filler
  copies until a target total is reached;
* a redundancy experiment: half kept once, the other half split in five
  groups replicated 2, 3, 5, 10 and 49 times.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial.transform import Rotation

from .tractogram import Tractogram, arc_length, compress, resample

TRUE_POSITIVE = "TP"
FALSE_POSITIVE = "FP"
REDUNDANT = "R"

REDUNDANT_MULTIPLICITIES = (2, 3, 5, 10, 49)
# DiSCo ground truth size and false-positive experiment total
DISCO_GT_COUNT = 12196
DISCO_FP_TOTAL = 89570


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    n_bundles: int = 10
    streamlines_per_bundle: int = 100
    grid_dims: tuple = (48, 48, 48)
    voxel_size: float = 2.0
    # accepted streamline lengths (mm)
    min_length: float = 40.0
    max_length: float = 250.0
    # centerline lengths drawn for generation (mm); must sit inside the bounds above
    centerline_length: tuple = (45.0, 75.0)
    bundle_radius: float = 3.0
    endpoint_spread: float = 1.5
    # bundle centroids are drawn within this half-width of the grid center (mm)
    center_spread: float = 10.0
    margin: float = 2.0
    step: float = 1.0
    compress_tolerance: float | None = 0.35
    rng_seed: int = 0

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.centerline_length = tuple(float(v) for v in self.centerline_length)
        if self.n_bundles < 1 or self.streamlines_per_bundle < 1:
            raise PhantomError("bundle and streamline counts must be >= 1")
        if self.voxel_size <= 0 or min(self.grid_dims) < 1:
            raise PhantomError("invalid grid")
        if not self.min_length <= self.centerline_length[0] <= self.centerline_length[1] <= self.max_length:
            raise PhantomError("centerline_length must lie inside [min_length, max_length]")
        half_extent = min(self.grid_dims) * self.voxel_size / 2
        if self.center_spread + self.margin + self.centerline_length[0] / 2 > half_extent:
            raise PhantomError("geometry does not fit the grid")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.grid_dims, dtype=np.float64) * self.voxel_size


def _bezier(ctrl, t):
    t = t[:, None]
    return ((1 - t) ** 3 * ctrl[0] + 3 * (1 - t) ** 2 * t * ctrl[1]
            + 3 * (1 - t) * t ** 2 * ctrl[2] + t ** 3 * ctrl[3])


def _draw_centerline(spec: PhantomSpec, rng, max_attempts=1000):
    lo = np.full(3, spec.margin)
    hi = spec.extent - spec.margin
    center = spec.extent / 2
    for _ in range(max_attempts):
        target_len = rng.uniform(*spec.centerline_length)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        mid = center + rng.uniform(-spec.center_spread, spec.center_spread, size=3)
        bend = rng.normal(size=3) * 0.25 * target_len
        half = 0.45 * target_len * direction
        ctrl = np.array([mid - half, mid - half / 3 + bend, mid + half / 3 + bend, mid + half])
        curve = _bezier(ctrl, np.linspace(0, 1, 400))
        length = arc_length(curve)
        if length <= 0:
            continue
        # rescale about the curve centroid to hit the drawn length
        centroid = curve.mean(axis=0)
        curve = mid + (curve - centroid) * (target_len / length)
        if _inside(curve, lo, hi):
            return curve
    raise PhantomError("geometry does not fit grid")


def _inside(points, lo, hi):
    return bool(np.all(points >= lo) and np.all(points <= hi))


def _frame(curve):
    """Two unit vectors orthogonal to the chord of ``curve``."""
    chord = curve[-1] - curve[0]
    chord /= np.linalg.norm(chord)
    helper = np.eye(3)[np.argmin(np.abs(chord))]
    u = np.cross(chord, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(chord, u)


def _draw_streamline(spec: PhantomSpec, curve, rng, max_attempts=100):
    u, v = _frame(curve)
    extent = spec.extent
    t = np.linspace(0, 1, len(curve))[:, None]
    for _ in range(max_attempts):
        r = spec.bundle_radius * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        base = r * (np.cos(phi) * u + np.sin(phi) * v)
        a, b = rng.normal(scale=spec.endpoint_spread, size=(2, 3))
        pts = curve + base + (1 - t) * a + t * b
        length = arc_length(pts)
        n = max(2, int(round(length / spec.step)) + 1)
        pts = resample(pts, n)
        if spec.compress_tolerance:
            pts = compress(pts, spec.compress_tolerance)
        if _inside(pts, 0.0, extent) and spec.min_length <= arc_length(pts) <= spec.max_length:
            return pts
    raise PhantomError("could not place a streamline inside the grid")


def generate_bundles(spec: PhantomSpec) -> tuple[Tractogram, np.ndarray]:
    """Ground-truth tractogram plus the bundle index of every streamline.

    Streamlines of all bundles are interleaved in a seeded random order so
    that any contiguous half of the ids samples every bundle.
    """
    root = np.random.SeedSequence(spec.rng_seed)
    bundle_seqs = root.spawn(spec.n_bundles + 1)
    streamlines, bundle_of = [], []
    for b, seq in enumerate(bundle_seqs[:-1]):
        rng = np.random.default_rng(seq)
        curve = _draw_centerline(spec, rng)
        for s_seq in seq.spawn(spec.streamlines_per_bundle):
            streamlines.append(_draw_streamline(spec, curve, np.random.default_rng(s_seq)))
            bundle_of.append(b)
    order = np.random.default_rng(bundle_seqs[-1]).permutation(len(streamlines))
    tract = Tractogram([streamlines[i] for i in order], spec.voxel_size, spec.grid_dims)
    return tract, np.asarray(bundle_of)[order]


def generate_ground_truth(spec: PhantomSpec) -> Tractogram:
    return generate_bundles(spec)[0]


def distort_rotate(streamline, rng, grid: Tractogram | None = None,
                   angle_range=(45.0, 315.0), max_attempts=100) -> np.ndarray:
    """Rigidly rotate a streamline about its centroid.

    Each Euler angle is drawn uniformly from ``angle_range`` degrees. When
    ``grid`` is given, rotations leaving the grid are redrawn.
    """
    pts = np.asarray(streamline, dtype=np.float64)
    centroid = pts.mean(axis=0)
    for _ in range(max_attempts):
        angles = rng.uniform(angle_range[0], angle_range[1], size=3)
        rot = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
        out = (pts - centroid) @ rot.T + centroid
        if grid is None or grid.contains(out):
            return out
    raise PhantomError(f"no in-grid rotation found after {max_attempts} attempts")


@dataclass
class LabeledTractogram:
    """Tractogram with per-streamline truth labels.

    ``multiplicity`` is the number of appearances of the source streamline
    (1 for true and false positives), ``provenance`` the ground-truth id the
    streamline was derived from.
    """

    tractogram: Tractogram
    labels: list
    multiplicity: np.ndarray
    provenance: np.ndarray
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.multiplicity = np.asarray(self.multiplicity, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.int64)
        m = len(self.tractogram)
        if not (len(self.labels) == len(self.multiplicity) == len(self.provenance) == m):
            raise ValueError("label table does not cover every streamline")

    def __len__(self):
        return len(self.tractogram)

    def mask(self, label) -> np.ndarray:
        return np.array([lab == label for lab in self.labels])

    def save_labels(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "truth_label", "multiplicity", "provenance_id"])
            for i, (lab, mult, prov) in enumerate(zip(self.labels, self.multiplicity, self.provenance)):
                w.writerow([i, lab, int(mult), int(prov)])

    @staticmethod
    def read_labels(path) -> tuple[list, np.ndarray, np.ndarray]:
        labels, mult, prov = [], [], []
        with open(path, newline="") as f:
            for i, row in enumerate(csv.DictReader(f)):
                if int(row["id"]) != i:
                    raise ValueError(f"label table ids are not dense at row {i}")
                labels.append(row["truth_label"])
                mult.append(int(row["multiplicity"]))
                prov.append(int(row["provenance_id"]))
        return labels, np.array(mult), np.array(prov)


def scaled_fp_total(n_ground_truth: int) -> int:
    """False-positive experiment total scaled from the DiSCo ratio."""
    return int(round(n_ground_truth * DISCO_FP_TOTAL / DISCO_GT_COUNT))


def build_fp_experiment(ground_truth: Tractogram, rng, target_total: int | None = None) -> LabeledTractogram:
    m = len(ground_truth)
    if m % 2:
        raise PhantomError("ground truth size must be even")
    if target_total is None:
        target_total = scaled_fp_total(m)
    if target_total < m:
        raise PhantomError(f"target total {target_total} < ground truth size {m}")
    half = m // 2
    streamlines = list(ground_truth.streamlines[:half])
    provenance = list(range(half))
    for i in range(half, m):
        streamlines.append(distort_rotate(ground_truth[i], rng, ground_truth))
        provenance.append(i)
    failed = 0
    while len(streamlines) < target_total:
        src = int(rng.integers(m))
        try:
            streamlines.append(distort_rotate(ground_truth[src], rng, ground_truth))
        except PhantomError:
            failed += 1
            continue
        provenance.append(src)
    labels = [TRUE_POSITIVE] * half + [FALSE_POSITIVE] * (target_total - half)
    tract = Tractogram(streamlines, ground_truth.voxel_size, ground_truth.grid_dims)
    return LabeledTractogram(tract, labels, np.ones(target_total), provenance,
                             notes={"filler_rotation_failures": failed})


def build_redundancy_experiment(ground_truth: Tractogram,
                                multiplicities=REDUNDANT_MULTIPLICITIES) -> LabeledTractogram:
    m = len(ground_truth)
    half = m // 2
    n_groups = len(multiplicities)
    group = (m - half) // n_groups
    if group < 1:
        raise PhantomError("ground truth too small to form nonempty redundancy groups")
    dropped = list(range(half + group * n_groups, m))
    streamlines = list(ground_truth.streamlines[:half])
    labels = [TRUE_POSITIVE] * half
    mult = [1] * half
    provenance = list(range(half))
    for g, k in enumerate(multiplicities):
        for src in range(half + g * group, half + (g + 1) * group):
            for _ in range(k):
                streamlines.append(ground_truth[src].copy())
                labels.append(REDUNDANT)
                mult.append(k)
                provenance.append(src)
    tract = Tractogram(streamlines, ground_truth.voxel_size, ground_truth.grid_dims)
    return LabeledTractogram(tract, labels, mult, provenance,
                             notes={"group_size": group, "dropped_ids": dropped})


def separable_toy(n_per_class: int, rng, length: float = 40.0, jitter: float = 1.0,
                  n_points: int = 12) -> tuple[Tractogram, np.ndarray]:
    """Gently bent streamlines along x (label 1) and the same shapes turned
    90 degrees about z (label 0), interleaved and shuffled."""
    streamlines, labels = [], []
    quarter = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    t = np.linspace(0.0, 1.0, n_points)
    for _ in range(n_per_class):
        start = rng.normal(scale=jitter, size=3)
        bend = rng.normal(scale=jitter, size=3) * np.sin(np.pi * t)[:, None]
        s = start + np.outer(t, [length, 0.0, 0.0]) + bend
        streamlines += [s, s @ quarter.T]
        labels += [1, 0]
    order = rng.permutation(len(labels))
    return Tractogram([streamlines[i] for i in order]), np.array(labels)[order]
