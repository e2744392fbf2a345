import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist

from monopatch.camera import project, unproject
from monopatch.io import read_ply
from monopatch.recon import (DepthMap, EmptyCloudError, FusedCloud, FusionParams, depth_metrics, export_cloud,
                             fscore, fuse_depth_maps, nearest_distances, score_geometry, single_view_cloud)
from monopatch.scene import SceneSpec, generate_synthetic_scene, simulate_mvs_depth


@pytest.fixture(scope="module")
def plane_views():
    return generate_synthetic_scene(SceneSpec.preset("plane", n_views=4), seed=0)


def test_identical_clouds_score_100(rng):
    pts = rng.random((500, 3))
    s = score_geometry(pts, pts, (0.001, 0.1))
    assert s.precision == (100.0, 100.0) and s.recall == (100.0, 100.0) and s.fscore == (100.0, 100.0)


def test_shift_by_two_tau_scores_zero():
    g = np.stack(np.meshgrid(np.linspace(0, 1, 30), np.linspace(0, 1, 30), indexing="ij"), -1).reshape(-1, 2)
    gt = np.column_stack([g, np.zeros(len(g))])
    tau = 0.01
    s = score_geometry(gt + [0, 0, 2 * tau], gt, (tau,))
    assert s.precision == (0.0,) and s.recall == (0.0,) and s.fscore == (0.0,)


def test_half_subset():
    rng = np.random.default_rng(3)
    gt = rng.random((4000, 3))
    pred = gt[rng.random(len(gt)) < 0.5]
    p, r, f = score_geometry(pred, gt, (1e-9,)).at(1e-9)
    frac = 100 * len(pred) / len(gt)
    assert p == 100.0 and r == pytest.approx(frac)
    assert abs(r - 50) < 3 and abs(f - 200 / 3) < 3


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 2000), st.integers(0, 2 ** 31))
def test_nearest_matches_brute_force(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((n, 3)), rng.random((m, 3))
    np.testing.assert_array_equal(nearest_distances(a, b), cdist(a, b).min(1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_fscore_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((300, 3)), rng.random((200, 3))
    ab, ba = score_geometry(a, b, (0.05, 0.1)), score_geometry(b, a, (0.05, 0.1))
    assert ab.precision == ba.recall and ab.recall == ba.precision
    assert ab.fscore == pytest.approx(ba.fscore, abs=1e-12)
    for p, r, f in zip(ab.precision, ab.recall, ab.fscore):
        assert 0 <= p <= 100 and 0 <= r <= 100
        assert f == (2 * p * r / (p + r) if p + r > 0 else 0.0)


def test_fscore_zero_and_empty():
    assert fscore(0.0, 0.0) == 0.0
    with pytest.raises(EmptyCloudError):
        score_geometry(np.zeros((0, 3)), np.ones((3, 3)))


def test_depth_metrics_toy():
    pred = np.array([1.0, 2.0, 3.3, 5.0])
    gt = np.array([1.0, 2.05, 3.0, 0.0])
    rel, inl = depth_metrics(pred, gt)
    assert rel == pytest.approx((0 + 0.05 / 2.05 + 0.3 / 3.0) / 3, abs=1e-15)
    assert inl == pytest.approx(100 * 2 / 3)
    with pytest.raises(ValueError):
        depth_metrics(np.zeros(3), np.ones(3))


def test_fusion_of_exact_maps(plane_views):
    bundle, gt = plane_views
    cloud = fuse_depth_maps(gt.depth, bundle.cameras)
    # every pixel of the first reference view seen by at least two other views is emitted
    d0 = gt.depth[0]
    vv, uu = np.nonzero(d0 > 0)
    X = unproject(bundle.cameras[0], uu, vv, d0[vv, uu])
    seen = np.zeros(len(X), int)
    for cam in bundle.cameras[1:]:
        u, v, _, front = project(cam, X)
        ui, vi = np.round(u), np.round(v)
        seen += front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    from_ref0 = sum(1 for v in cloud.views if v[0] == 0)
    assert from_ref0 == int((seen >= 2).sum())
    # the plane z = 0 is reproduced exactly by means of points on it
    assert np.abs(cloud.points[:, 2]).max() < 1e-6
    assert (cloud.support >= 2).all()


def test_scaled_view_gets_no_support(plane_views):
    bundle, gt = plane_views
    maps = [d.copy() for d in gt.depth]
    maps[0] = maps[0] * 1.1
    cloud = fuse_depth_maps(maps, bundle.cameras, FusionParams(rel_depth=0.01))
    assert not any(0 in v for v in cloud.views)


def test_fusion_reprojection_invariant(box_scene):
    bundle, gt = box_scene
    noisy = simulate_mvs_depth(gt, rel_noise=0.003, dropout=0.2, seed=4)
    eps = 0.01
    cloud = fuse_depth_maps(noisy, bundle.cameras, FusionParams(rel_depth=eps))
    assert len(cloud) > 1000
    bad = 0
    for j, cam in enumerate(bundle.cameras):
        k = np.array([j in v for v in cloud.views])
        u, v, z, front = project(cam, cloud.points[k])
        ui, vi = np.round(u).astype(int), np.round(v).astype(int)
        assert front.all()
        inside = (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        D = noisy[j][vi[inside], ui[inside]]
        bad += int((np.abs(z[inside] - D) > eps * D)[D > 0].sum())
    assert bad == 0


def test_fusion_filters_noise(box_scene):
    bundle, gt = box_scene
    rng = np.random.default_rng(5)
    maps = []
    for d in gt.depth:
        bad = rng.random(d.shape) < 0.3
        maps.append(np.where(bad, d * rng.uniform(0.5, 1.5, d.shape), d * (1 + 0.002 * rng.standard_normal(d.shape))))
    sw = bundle.scene_width
    fused = score_geometry(fuse_depth_maps(maps, bundle.cameras), gt.points, (0.02 * sw,))
    single = score_geometry(single_view_cloud(maps[0], bundle.cameras[0]), gt.points, (0.02 * sw,))
    assert fused.fscore[0] > single.fscore[0]


def test_fusion_needs_two_maps(plane_views):
    with pytest.raises(ValueError):
        fuse_depth_maps([plane_views[1].depth[0]], plane_views[0].cameras)


def test_normal_check_rejects_support(plane_views):
    bundle, gt = plane_views
    up = np.zeros(gt.depth[0].shape + (3,))
    up[..., 2] = 1
    maps = {i: DepthMap(d, d > 0, up.copy()) for i, d in enumerate(gt.depth)}
    maps[0].normal[..., 2] = -1
    cloud = fuse_depth_maps(maps, bundle.cameras)
    assert not any(0 in v for v in cloud.views)


def test_export_roundtrip_and_empty(tmp_path, rng):
    c = FusedCloud(rng.random((50, 3)), rng.random((50, 3)), np.full(50, 2), [[0, 1]] * 50)
    for binary in (False, True):
        export_cloud(c, tmp_path / "c.ply", binary=binary)
        pts, cols, _ = read_ply(tmp_path / "c.ply")
        np.testing.assert_allclose(pts, c.points, atol=1e-6)
    export_cloud(FusedCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int)), tmp_path / "e.ply")
    assert len(read_ply(tmp_path / "e.ply")[0]) == 0
    with pytest.raises(OSError):
        export_cloud(c, tmp_path / "missing" / "x.ply")


@pytest.mark.slow
def test_binary_much_smaller_than_ascii(tmp_path):
    rng = np.random.default_rng(0)
    c = FusedCloud(rng.random((10 ** 6, 3)), rng.random((10 ** 6, 3)), np.zeros(10 ** 6, int))
    export_cloud(c, tmp_path / "a.ply")
    export_cloud(c, tmp_path / "b.ply", binary=True)
    assert (tmp_path / "b.ply").stat().st_size < (tmp_path / "a.ply").stat().st_size
