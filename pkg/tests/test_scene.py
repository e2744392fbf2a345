import numpy as np
import pytest

from monopatch.camera import project
from monopatch.losses import solve_patch_alignment
from monopatch.scene import (CueSpec, SceneSpec, cast_rays, generate_synthetic_scene, make_scene,
                             simulate_monocular_cues, simulate_mvs_depth, simulate_sfm_points)
from monopatch.camera import pixel_directions


def test_single_plane_one_view_all_hit_analytic_depth():
    bundle, gt = generate_synthetic_scene(SceneSpec.preset("plane"), seed=0)
    assert bundle.n_views == 1
    cam = bundle.cameras[0]
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    d = pixel_directions(cam, uu, vv)
    # plane z = 0: t = -o_z / d_z
    t = -cam.center[2] / d[..., 2]
    assert np.all(np.isfinite(gt.depth[0]))
    np.testing.assert_allclose(gt.depth[0], t, rtol=1e-12)


def test_box_scene_deterministic(box_scene):
    b1, g1 = make_scene("box", seed=7)
    b2, g2 = box_scene
    for a, b in zip(b1.images, b2.images):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(b1.mono_depth, b2.mono_depth):
        assert a.tobytes() == b.tobytes()
    assert b1.sfm_points.tobytes() == b2.sfm_points.tobytes()
    assert g1.points.tobytes() == g2.points.tobytes()


def test_default_scene_shape(box_scene):
    bundle, _ = box_scene
    assert bundle.n_views == 12
    assert bundle.images[0].shape == (64, 96, 3)
    bundle.validate()


def test_gt_points_reproject_into_some_view(box_scene):
    bundle, gt = box_scene
    sw = bundle.scene_width
    best = np.full(len(gt.points), np.inf)
    for cam, depth in zip(bundle.cameras, gt.depth):
        u, v, z, front = project(cam, gt.points)
        ui, vi = np.round(u).astype(int), np.round(v).astype(int)
        ok = front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        # compare against the exact ray cast through the point itself (not the pixel center)
        d = gt.points[ok] - cam.center
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t, _, _ = cast_rays(gt.primitives, np.broadcast_to(cam.center, d.shape), d)
        err = np.full(len(gt.points), np.inf)
        err[ok] = np.abs(t - z[ok])
        best = np.minimum(best, err)
    assert np.all(best < 1e-5 * sw)


def test_gt_depth_matches_ray_cast(box_scene):
    bundle, gt = box_scene
    cam = bundle.cameras[5]
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    d = pixel_directions(cam, uu, vv).reshape(-1, 3)
    t = gt.ray_depth(np.broadcast_to(cam.center, d.shape), d)
    assert np.abs(t - gt.depth[5].ravel()).max() < 1e-5 * bundle.scene_width


def test_zero_primitives_or_views_rejected():
    with pytest.raises(ValueError):
        generate_synthetic_scene(SceneSpec(n_primitives=0), 0)
    with pytest.raises(ValueError):
        generate_synthetic_scene(SceneSpec(n_views=0), 0)


def test_zero_corruption_is_exact_affine(box_scene):
    _, gt = box_scene
    b0, _ = generate_synthetic_scene("box", 7)
    cues = CueSpec(warp_amplitude=0.0, normal_noise_deg=0.0)
    b = simulate_monocular_cues(b0, gt, cues, seed=3)
    for (a, off), mono, d in zip(gt.cue_affine, b.mono_depth, gt.depth):
        np.testing.assert_allclose(mono, a * d + off, rtol=1e-12, atol=1e-12)


def test_scale_two_recovers_half():
    b0, gt = generate_synthetic_scene("box", 7)
    b = simulate_monocular_cues(b0, gt, CueSpec(fixed_scale=2.0, fixed_shift=0.0, warp_amplitude=0.0,
                                                normal_noise_deg=0.0), seed=1)
    mono, d = b.mono_depth[0][10:18, 20:28], gt.depth[0][10:18, 20:28]
    al = solve_patch_alignment(mono, d)
    assert al.valid and float(al.scale) == pytest.approx(0.5, abs=1e-9)
    assert float(al.shift) == pytest.approx(0.0, abs=1e-9)


def test_normal_noise_mean_angle():
    b0, gt = generate_synthetic_scene("box", 7)
    b = simulate_monocular_cues(b0, gt, CueSpec(normal_noise_deg=5.0), seed=2)
    ang = []
    for n_mono, n_gt in zip(b.mono_normal, gt.normal):
        c = np.clip((n_mono * n_gt).sum(-1), -1, 1)
        ang.append(np.degrees(np.arccos(c)).ravel())
    ang = np.concatenate(ang)
    assert ang.size >= 10_000
    assert 4.0 <= ang.mean() <= 6.0
    assert np.abs(np.linalg.norm(b.mono_normal[0], axis=-1) - 1).max() < 1e-4


def test_sfm_exact_points_on_surface():
    b0, gt = generate_synthetic_scene("box", 7)
    b, clean = simulate_sfm_points(b0, gt, count=300, noise_sigma=0.0, outlier_fraction=0.0, seed=0)
    sw = b.scene_width
    checked = 0
    for p, views in zip(b.sfm_points, b.sfm_views):
        for i in views:
            cam = b.cameras[i]
            d = (p - cam.center) / np.linalg.norm(p - cam.center)
            t, _, _ = cast_rays(gt.primitives, cam.center[None], d[None])
            assert abs(t[0] - np.linalg.norm(p - cam.center)) < 1e-4 * sw
            checked += 1
    assert checked > 300


def test_sfm_outlier_count():
    b0, gt = generate_synthetic_scene("box", 7)
    b, _ = simulate_sfm_points(b0, gt, count=200, outlier_fraction=0.3, seed=0)
    assert int(b.sfm_outlier.sum()) == round(0.3 * 200)
    assert len(b.sfm_points) == 200


def test_sfm_noise_rms():
    # isotropic noise of std sigma per axis has RMS displacement sigma * sqrt(3)
    b0, gt = generate_synthetic_scene("box", 7)
    sigma = 0.002 * b0.scene_width
    b, clean = simulate_sfm_points(b0, gt, count=4000, noise_sigma=sigma, outlier_fraction=0.0, seed=5)
    rms = np.sqrt(np.mean(np.sum((b.sfm_points - clean) ** 2, axis=1)))
    assert 0.9 * sigma * np.sqrt(3) <= rms <= 1.1 * sigma * np.sqrt(3)


def test_sfm_invalid_arguments():
    b0, gt = generate_synthetic_scene("box", 7)
    with pytest.raises(ValueError):
        simulate_sfm_points(b0, gt, count=5)
    with pytest.raises(ValueError):
        simulate_sfm_points(b0, gt, count=50, outlier_fraction=0.6)


def test_bundle_invariants(box_scene):
    bundle, _ = box_scene
    lo, hi = bundle.scene_aabb
    assert np.all((bundle.sfm_points >= lo) & (bundle.sfm_points <= hi))
    assert bundle.scene_width == pytest.approx(float(np.max(hi - lo)))
    with pytest.raises(ValueError):
        bundle.validate(min_views=13)


def test_mvs_stand_in_depth(box_scene):
    _, gt = box_scene
    mvs = simulate_mvs_depth(gt, rel_noise=0.0, dropout=0.5, seed=0)
    m = mvs[0] > 0
    assert 0.4 < m.mean() < 0.6
    np.testing.assert_allclose(mvs[0][m], gt.depth[0][m])
