"""Virtual viewpoints near training cameras and the occlusion mask for their patches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import ray_aabb
from .render import RenderResult, render_rays

VIRTUAL_RADIUS = 0.05  # fraction of the scene width
ANGLE_THRESHOLD_DEG = 10.0


def sample_virtual_origin(origin, scene_width, rng, aabb=None, radius_fraction=VIRTUAL_RADIUS, tries=16):
    """Uniform direction, uniform radius in ``(0, radius_fraction * scene_width]``."""
    if not scene_width > 0:
        raise ValueError("scene_width must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    R = radius_fraction * scene_width
    cand = origin
    for _ in range(tries):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        r = R * (1.0 - rng.random())  # (0, R]
        cand = origin + r * u
        if aabb is None or np.all((cand >= aabb[0]) & (cand <= aabb[1])):
            return cand
    lo, hi = np.asarray(aabb[0]), np.asarray(aabb[1])
    return np.clip(cand, lo, hi)


def occlusion_mask(origin, dirs, X, virtual_origin, virtual_dirs, virtual_depth,
                   virtual_valid=None, threshold_deg=ANGLE_THRESHOLD_DEG, scene_width=1.0):
    """Keep pixels whose virtual surface point lies within ``threshold_deg`` of the training ray.

    Arrays are per pixel (..., 3); the two centers broadcast against them.
    """
    origin = np.asarray(origin, dtype=np.float64)
    Xv = np.asarray(virtual_origin, dtype=np.float64) + np.asarray(virtual_depth)[..., None] * np.asarray(virtual_dirs)
    rel = Xv - origin
    norm = np.linalg.norm(rel, axis=-1)
    ok = norm >= 1e-9 * scene_width
    v = rel / np.where(ok, norm, 1.0)[..., None]
    dirs = np.asarray(dirs, dtype=np.float64)
    # atan2 keeps small angles accurate where arccos of a rounded dot product does not
    cos = np.clip((v * dirs).sum(-1), -1.0, 1.0)
    theta = np.arctan2(np.linalg.norm(np.cross(v, dirs), axis=-1), cos)
    mask = ok & (theta <= np.deg2rad(threshold_deg))
    if virtual_valid is not None:
        mask &= np.asarray(virtual_valid, bool)
    return mask, theta


@dataclass
class VirtualPatch:
    origin: np.ndarray        # virtual center o*
    dirs: np.ndarray          # (k, k, 3)
    points: np.ndarray        # training-surface points X_p (k, k, 3)
    render: RenderResult      # virtual render, reshaped (k, k)
    mask: np.ndarray          # (k, k)
    theta: np.ndarray


def correspond_and_render(field, restriction, origin, dirs, depth, depth_valid, virtual_origin, aabb,
                          step, rng=None, threshold_deg=ANGLE_THRESHOLD_DEG, scene_width=1.0,
                          normals=False):
    """Build and render virtual patches for training patches.

    ``dirs``/``depth``/``depth_valid`` are the training rays and their
    rendered depth, shaped (..., k, k[, 3]); ``origin`` and ``virtual_origin``
    broadcast against ``dirs`` (one center per patch is the usual case).
    Training depths are treated as constants.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    shape = dirs.shape[:-1]
    depth = np.asarray(depth, dtype=np.float64)
    o_train = np.broadcast_to(np.asarray(origin, dtype=np.float64), dirs.shape)
    o_virt = np.broadcast_to(np.asarray(virtual_origin, dtype=np.float64), dirs.shape)
    X = o_train + depth[..., None] * dirs
    rel = X - o_virt
    nrm = np.linalg.norm(rel, axis=-1, keepdims=True)
    same = np.all(o_virt == o_train, axis=-1, keepdims=True) | (nrm == 0)
    vdirs = np.where(same, dirs, rel / np.where(nrm > 0, nrm, 1.0))
    o = o_virt.reshape(-1, 3).copy()
    tn, tf, hit = ray_aabb(o, vdirs.reshape(-1, 3), aabb)
    tf = np.where(hit, tf, tn)
    res = render_rays(field, o, vdirs.reshape(-1, 3), tn, tf, step, restriction, rng, normals=normals)
    res = res.reshape(shape)
    mask, theta = occlusion_mask(o_train, dirs, X, o_virt, vdirs, res.depth,
                                 res.depth_valid, threshold_deg, scene_width)
    mask &= np.asarray(depth_valid, bool)
    return VirtualPatch(np.asarray(virtual_origin, dtype=np.float64), vdirs, X, res, mask, theta)
