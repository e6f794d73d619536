import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from rsift.density import (
    DegenerateSubsetError, DensityFilter, FilterParams, TargetDensityField, bin_axes,
    build_target_field, contribution_matrix, cost, optimal_scale, rasterize, removal_delta,
    sift_filter, track_density,
)
from rsift.phantom import PhantomSpec, build_fp_experiment, generate_ground_truth
from rsift.tractogram import Tractogram, arc_length, resample

AXES = bin_axes(6)


@pytest.fixture(scope="module")
def gt():
    return generate_ground_truth(PhantomSpec(n_bundles=4, streamlines_per_bundle=25, rng_seed=5))


@pytest.fixture(scope="module")
def target(gt):
    return build_target_field(gt)


def test_bin_axes():
    for b in (3, 6, 10):
        ax = bin_axes(b)
        assert ax.shape == (b, 3)
        np.testing.assert_allclose(np.linalg.norm(ax, axis=1), 1.0)
        cos = np.abs(ax @ ax.T)[~np.eye(b, dtype=bool)]
        assert cos.max() < 1 - 1e-6


def test_rasterize_axial_segment():
    seg = np.array([(0.5, 0.5, 0.5), (2.5, 0.5, 0.5)])
    cells, lengths = rasterize(seg, (4, 4, 4), 1.0, AXES)
    voxels = cells // 6
    assert list(np.unravel_index(voxels, (4, 4, 4))[0]) == [0, 1, 2]
    np.testing.assert_allclose(lengths, [0.5, 1.0, 0.5])
    assert len(set(cells % 6)) == 1


def test_rasterize_total_length(gt):
    for s in gt.streamlines[:30]:
        _, lengths = rasterize(s, gt.grid_dims, gt.voxel_size, AXES)
        assert abs(lengths.sum() - arc_length(s)) < 1e-9


def test_rasterize_out_of_grid():
    with pytest.raises(ValueError):
        rasterize(np.array([(0.5, 0.5, 0.5), (5.0, 0.5, 0.5)]), (4, 4, 4), 1.0, AXES)


def test_rasterize_matches_monte_carlo(gt):
    dims, vs = gt.grid_dims, gt.voxel_size
    for s in gt.streamlines[:3]:
        length = arc_length(s)
        n = 10 ** 6
        # sample points at the centers of n equal arc-length steps
        pts = resample(s, 2 * n + 1)[1::2]
        vox = np.minimum(np.floor(pts / vs).astype(int), np.array(dims) - 1)
        flat = np.ravel_multi_index(vox.T, dims)
        mc = np.bincount(flat, minlength=int(np.prod(dims))) * (length / n)
        cells, lengths = rasterize(s, dims, vs, AXES)
        exact = np.bincount(cells // 6, weights=lengths, minlength=int(np.prod(dims)))
        spacing = length / n
        touched = (exact > 0) | (mc > 0)
        err = np.abs(mc - exact)[touched]
        assert np.all(err <= np.maximum(0.02 * exact[touched], 2 * spacing))


def test_target_axial_line():
    line = np.array([(0.5, 1.5, 1.5), (3.5, 1.5, 1.5)])
    t = build_target_field(Tractogram([line], 1.0, (4, 4, 4)), n_bins=3)
    vol = t.as_volume()
    nz = np.argwhere(vol > 0)
    assert set(nz[:, 3]) == {0}
    assert set(map(tuple, nz[:, 1:3])) == {(1, 1)}


def test_target_scale_invariance(gt, target):
    doubled = Tractogram(gt.streamlines * 2, gt.voxel_size, gt.grid_dims)
    t2 = build_target_field(doubled)
    np.testing.assert_allclose(t2.mu, target.mu, rtol=1e-12, atol=1e-18)
    assert abs(target.mu.sum() - 1.0) < 1e-12


def test_target_empty():
    with pytest.raises(ValueError):
        build_target_field(Tractogram([], 1.0, (2, 2, 2)))


def test_target_save_load(tmp_path, target):
    target.save(tmp_path / "mu.bin")
    back = TargetDensityField.load(tmp_path / "mu.bin")
    assert back.grid_dims == target.grid_dims and back.voxel_size == target.voxel_size
    assert np.array_equal(back.axes, target.axes)
    assert np.array_equal(back.mu, target.mu)


# -- cost --------------------------------------------------------------------


def test_cost_perfect_fit():
    mu = np.array([0.2, 0.3, 0.5, 0.0])
    assert cost(7.0 * mu, mu) == pytest.approx(0.0, abs=1e-30)


def test_cost_zero_density():
    mu = np.array([0.2, 0.3, 0.5])
    assert cost(np.zeros(3), mu, lam=1.0) == pytest.approx(np.sum(mu ** 2))
    with pytest.raises(DegenerateSubsetError):
        cost(np.zeros(3), mu)


def test_closed_form_scale_matches_golden_section():
    rng = np.random.default_rng(0)
    for _ in range(10):
        mu = rng.random(50)
        mu /= mu.sum()
        td = rng.random(50) * rng.uniform(1, 100)
        lam = optimal_scale(td, mu)
        res = minimize_scalar(lambda x: cost(td, mu, x), bracket=(0, 2 * lam), method="golden",
                              tol=1e-12)
        assert abs(res.x - lam) < 1e-9 * max(1.0, lam)


def test_removal_delta_matches_scratch(gt, target):
    A = target.contributions(gt)
    td = track_density(A)
    lam = optimal_scale(td, target.mu)
    for i in range(0, len(gt), 7):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        d = removal_delta(A.indices[lo:hi], A.data[lo:hi], td, target.mu, lam)
        td2 = td.copy()
        td2[A.indices[lo:hi]] -= A.data[lo:hi]
        assert abs(d - (cost(td2, target.mu, lam) - cost(td, target.mu, lam))) < 1e-9


def test_removal_delta_sign_when_over_dense():
    mu = np.array([0.1, 0.1])
    td = np.array([5.0, 5.0])
    # lam*td = 0.5 > mu everywhere, and removing 1.0 keeps it above mu
    assert removal_delta(np.array([0, 1]), np.array([1.0, 1.0]), td, mu, 0.1) < 0


def test_duplicate_pair_equal_delta(gt, target):
    dup = Tractogram(list(gt.streamlines) + [gt[0]], gt.voxel_size, gt.grid_dims)
    A = target.contributions(dup)
    td = track_density(A)
    lam = optimal_scale(td, target.mu)

    def delta(i):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        return removal_delta(A.indices[lo:hi], A.data[lo:hi], td, target.mu, lam)

    assert delta(0) == delta(len(dup) - 1)


# -- filter ------------------------------------------------------------------


def test_perfect_fit_fixpoint(gt, target):
    out = sift_filter(gt, target)
    assert len(out.accepted) == len(gt)
    assert out.removal_order == []


def test_disjoint_excess_removed_first(gt, target):
    stray = np.array([(1.0, 1.0, 1.0), (1.0, 1.0, 60.0)])
    assert np.all(target.as_volume()[0, 0, :30] == 0)
    t = Tractogram(list(gt.streamlines) + [stray], gt.voxel_size, gt.grid_dims)
    out = sift_filter(t, target)
    assert out.removal_order[0] == len(gt)


@pytest.fixture(scope="module")
def fp_small(gt):
    return build_fp_experiment(gt, np.random.default_rng(9), target_total=400)


def test_partition_monotone_and_exact_deltas(fp_small, target):
    filt = DensityFilter.for_tractogram(fp_small.tractogram, target)
    rng = np.random.default_rng(0)
    for n in (400, 200, 60):
        ids = np.sort(rng.choice(400, n, replace=False))
        out = filt.run(ids, FilterParams(verify=True))
        assert set(out.accepted) | set(out.rejected) == set(ids)
        assert not set(out.accepted) & set(out.rejected)
        costs = [c for _, c in out.cost_trace]
        assert all(b <= a + 1e-12 * abs(a) for a, b in zip(costs, costs[1:]))
        assert len(out.delta_errors) == len(out.removal_order)
        assert max(out.delta_errors, default=0.0) < 1e-9
        assert all(d < 0 for d in out.removal_deltas)


def test_filter_determinism(fp_small, target):
    filt = DensityFilter.for_tractogram(fp_small.tractogram, target)
    ids = np.arange(0, 400, 2)
    a, b = filt.run(ids), filt.run(ids)
    assert a.removal_order == b.removal_order
    assert np.array_equal(a.accepted, b.accepted)
    assert a.final_cost == b.final_cost


def test_filter_target_count(fp_small, target):
    out = sift_filter(fp_small.tractogram, target, FilterParams(target_count=350))
    assert len(out.accepted) == 350
    assert out.stop_reason == "target count"


def test_degenerate_subset(target):
    stray = Tractogram([np.array([(1.0, 1.0, 1.0), (1.0, 1.0, 20.0)])], target.voxel_size,
                       target.grid_dims)
    with pytest.raises(DegenerateSubsetError):
        sift_filter(stray, target)


def test_greedy_beats_random_removal(fp_small, target):
    ids = np.concatenate([np.arange(25), np.arange(200, 225)])  # 25 TP + 25 FP
    sub = fp_small.tractogram.subset(ids)
    A = contribution_matrix(sub, target.axes)
    out = DensityFilter(target, A).run()
    kept = len(out.accepted)
    assert 0 < kept < 50
    greedy = cost(track_density(A, out.accepted), target.mu)
    rng = np.random.default_rng(1)
    for _ in range(1000):
        keep = np.sort(rng.choice(50, kept, replace=False))
        assert greedy <= cost(track_density(A, keep), target.mu) + 1e-15


def test_fp_experiment_retains_minority(fp_small, target):
    out = sift_filter(fp_small.tractogram, target)
    assert len(out.accepted) / len(fp_small) < 0.5


def test_outcome_csv(tmp_path, fp_small, target):
    out = sift_filter(fp_small.tractogram, target)
    out.save_csv(tmp_path / "o.csv")
    rows = (tmp_path / "o.csv").read_text().splitlines()
    assert rows[0] == "id,verdict,removal_rank,delta_cost"
    assert len(rows) == 401
    first = [r for r in rows[1:] if r.split(",")[2] == "0"]
    assert first and first[0].split(",")[1] == "rejected"
