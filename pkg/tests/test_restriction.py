import numpy as np
import pytest

from monopatch.losses import AffineDepthAlignment
from monopatch.restriction import (NoValidAlignmentError, RansacDepthAligner, RestrictionGrid, align_bundle,
                                   build_restriction, label_voxels, ransac_align_view)


def planted(seed, n=300, outliers=0.3, noise=0.01, a=1.7, b=1.0):
    rng = np.random.default_rng(seed)
    mono = rng.uniform(0.5, 3.0, n)
    metric = a * mono + b
    metric *= 1 + noise * rng.standard_normal(n)
    bad = rng.random(n) < outliers
    metric[bad] = rng.uniform(0.2, 8.0, bad.sum())
    return mono, metric


def test_exact_data_recovers_map():
    mono, metric = planted(0, outliers=0, noise=0)
    est = RansacDepthAligner(random_state=0).fit(mono, metric)
    assert est.valid_ and abs(est.scale_ / 1.7 - 1) < 1e-6 and abs(est.shift_ / 1.0 - 1) < 1e-6
    np.testing.assert_allclose(est.transform(mono), metric, rtol=1e-6)


def test_ransac_with_outliers_monte_carlo():
    good = 0
    for seed in range(100):
        mono, metric = planted(seed)
        est = RansacDepthAligner(random_state=seed).fit(mono, metric)
        good += est.valid_ and abs(est.scale_ / 1.7 - 1) <= 0.02 and abs(est.shift_ / 1.0 - 1) <= 0.02
    assert good >= 95


def test_coincident_depths_skip_candidates():
    est = RansacDepthAligner(n_iter=50, random_state=0).fit(np.full(10, 2.0), np.linspace(1, 3, 10))
    assert not est.valid_


def test_too_few_points_invalid():
    assert not RansacDepthAligner().fit([1.0], [2.0]).valid_
    assert not RansacDepthAligner(min_inliers=4).fit([1.0, 2.0, 3.0], [2.0, 3.0, 4.0]).valid_


def test_sklearn_params():
    est = RansacDepthAligner(n_iter=10, threshold=0.1)
    assert est.get_params() == {"n_iter": 10, "threshold": 0.1, "min_inliers": 4, "random_state": None}


def _plane_grid(scene, tolerance, resolution=32):
    bundle, _ = scene
    al = {0: AffineDepthAlignment(np.float64(1.0), np.float64(0.0), np.bool_(True))}
    return bundle, build_restriction(bundle, al, resolution=resolution, tolerance=tolerance)


def _plane_oracle(bundle, tolerance, centers):
    """Band test written directly from the pinhole model (pixel centers at half-integers)."""
    cam = bundle.cameras[0]
    Xc = (centers.reshape(-1, 3) - cam.center) @ cam.R
    z = np.linalg.norm(Xc, axis=1)
    front = Xc[:, 2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * Xc[:, 0] / Xc[:, 2] + cam.cx - 0.5
        v = cam.fy * Xc[:, 1] / Xc[:, 2] + cam.cy - 0.5
    ui, vi = np.round(u), np.round(v)
    inside = front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    # ray depth to the plane z = 0 through the nearest pixel center
    ray = np.stack([(ui + 0.5 - cam.cx) / cam.fx, (vi + 0.5 - cam.cy) / cam.fy, np.ones_like(ui)], 1)
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    world = ray @ cam.R.T
    with np.errstate(divide="ignore", invalid="ignore"):
        D = cam.center[2] / -world[:, 2]
    lab = inside & (np.abs(z - D) <= tolerance * D)
    return lab.reshape(centers.shape[:-1])


def test_plane_band_matches_closed_form(plane_scene):
    bundle, grid = _plane_grid(plane_scene, 0.2)
    assert np.array_equal(grid.occupancy, _plane_oracle(bundle, 0.2, grid.centers()))
    assert grid.occupancy.any()


def test_zero_tolerance_nearly_empty(plane_scene):
    _, grid = _plane_grid(plane_scene, 0.0)
    _, wide = _plane_grid(plane_scene, 0.2)
    assert grid.occupancy.sum() < 0.05 * wide.occupancy.sum()


def test_box_scene_keeps_surfaces(box_scene):
    bundle, gt = box_scene
    grid = build_restriction(bundle)
    assert grid.is_permitted(gt.points).mean() >= 0.99
    assert grid.fraction < 0.4


def test_monotone_in_tolerance_and_views(box_scene):
    bundle, _ = box_scene
    al = align_bundle(bundle)
    centers = RestrictionGrid.full(bundle.scene_aabb, 24).centers()
    prev = None
    for tol in (0.0, 0.05, 0.1, 0.2, 0.4):
        lab = label_voxels(centers, bundle.cameras, bundle.mono_depth, al, tol)
        if prev is not None:
            assert not (prev & ~lab).any()
        prev = lab
    prev = None
    for k in range(1, bundle.n_views + 1):
        lab = label_voxels(centers, bundle.cameras, bundle.mono_depth, {i: al[i] for i in range(k)}, 0.2)
        if prev is not None:
            assert not (prev & ~lab).any()
        prev = lab


def test_no_valid_alignment(box_scene):
    bundle, _ = box_scene
    bad = {i: AffineDepthAlignment(np.float64(1), np.float64(0), np.bool_(False)) for i in range(bundle.n_views)}
    with pytest.raises(NoValidAlignmentError):
        build_restriction(bundle, bad)


def test_view_alignment_recovers_cue_map(box_scene):
    bundle, gt = box_scene
    al = ransac_align_view(bundle.mono_depth[0], bundle.cameras[0], bundle.sfm_points, bundle.sfm_views, 0)
    assert al.valid
    m = gt.depth[0] > 0
    rel = np.abs(al.apply(bundle.mono_depth[0][m]) - gt.depth[0][m]) / gt.depth[0][m]
    # the smooth cue warp keeps a single per-image affine a few percent off
    assert np.median(rel) < 0.1


def test_is_permitted_matches_predicate(box_scene):
    bundle, _ = box_scene
    grid = build_restriction(bundle, resolution=32)
    rng = np.random.default_rng(0)
    lo, hi = bundle.scene_aabb
    span = hi - lo
    x = rng.uniform(lo - 0.1 * span, hi + 0.1 * span, (100000, 3))
    inside = np.all((x >= lo) & (x <= hi), axis=1)
    idx = np.clip(((x - lo) / span * 32).astype(int), 0, 31)
    # recompute the labeling predicate at the containing voxel's center
    centers = lo + (idx + 0.5) * span / 32
    lab = label_voxels(centers, bundle.cameras, bundle.mono_depth, grid.alignments, 0.2)
    np.testing.assert_array_equal(grid.is_permitted(x), inside & lab)
    assert grid.is_permitted(grid.centers()[grid.occupancy]).all()
    assert not grid.is_permitted(hi + 1.0)


def test_save_load_roundtrip(tmp_path, box_scene):
    grid = build_restriction(box_scene[0], resolution=(16, 20, 12))
    grid.save(tmp_path / "g.grid")
    back = RestrictionGrid.load(tmp_path / "g.grid")
    assert back.resolution == (16, 20, 12)
    np.testing.assert_array_equal(back.occupancy, grid.occupancy)
    np.testing.assert_array_equal(back.aabb, grid.aabb)
    (tmp_path / "bad").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        RestrictionGrid.load(tmp_path / "bad")
