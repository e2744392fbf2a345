"""Density restriction: RANSAC alignment of monocular depth to SfM points, then voxel labeling."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .camera import project
from .losses import AffineDepthAlignment

GRID_MAGIC = b"MPRG"
GRID_VERSION = 1


class NoValidAlignmentError(ValueError):
    pass


class RansacDepthAligner(TransformerMixin, BaseEstimator):
    """Robust scale/shift mapping monocular depth onto metric depth.

    Parameters
    ----------
    n_iter : int, default=1000
        Number of two-point minimal fits.
    threshold : float, default=0.05
        Inlier test ``|s * mono + t - metric| <= threshold * metric``.
    min_inliers : int, default=4
        Fewer inliers in the best consensus leaves the aligner invalid.
    random_state : int, Generator or None

    Attributes
    ----------
    scale_, shift_ : float
    inlier_mask_ : ndarray of bool
    valid_ : bool
    """

    def __init__(self, n_iter=1000, threshold=0.05, min_inliers=4, random_state=None):
        self.n_iter = n_iter
        self.threshold = threshold
        self.min_inliers = min_inliers
        self.random_state = random_state

    def fit(self, X, y):
        d = np.asarray(X, dtype=np.float64).reshape(-1)
        m = np.asarray(y, dtype=np.float64).reshape(-1)
        if d.shape != m.shape:
            raise ValueError("mono and metric depth must have the same length")
        self.scale_, self.shift_, self.valid_ = 1.0, 0.0, False
        self.inlier_mask_ = np.zeros(len(d), bool)
        if len(d) < 2:
            return self
        rng = self.random_state if isinstance(self.random_state, np.random.Generator) \
            else np.random.default_rng(check_random_state(self.random_state).randint(2 ** 31))
        i = rng.integers(0, len(d), size=self.n_iter)
        j = (i + rng.integers(1, len(d), size=self.n_iter)) % len(d)
        dd = d[i] - d[j]
        ok = np.abs(dd) > 1e-12 * np.maximum(np.abs(d[i]), np.abs(d[j]))
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(ok, (m[i] - m[j]) / np.where(ok, dd, 1.0), 0.0)
        t = m[i] - s * d[i]
        ok &= s > 0
        if not ok.any():
            return self
        s, t = s[ok], t[ok]
        inl = np.abs(s[:, None] * d[None] + t[:, None] - m[None]) <= self.threshold * np.abs(m)[None]
        count = inl.sum(1)
        best = int(np.argmax(count))
        mask = inl[best]
        if count[best] < self.min_inliers:
            return self
        A = np.stack([d[mask], np.ones(mask.sum())], 1)
        (s_ls, t_ls), *_ = np.linalg.lstsq(A, m[mask], rcond=None)
        if s_ls > 0:
            self.scale_, self.shift_ = float(s_ls), float(t_ls)
        else:
            self.scale_, self.shift_ = float(s[best]), float(t[best])
        self.inlier_mask_ = np.abs(self.scale_ * d + self.shift_ - m) <= self.threshold * np.abs(m)
        self.valid_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        return self.scale_ * np.asarray(X, dtype=np.float64) + self.shift_


def view_correspondences(mono_depth, camera, sfm_points, sfm_views=None, view=None):
    """(mono, metric) depth pairs for SfM points seen in a view (nearest-pixel lookup)."""
    pts = np.asarray(sfm_points, dtype=np.float64).reshape(-1, 3)
    if sfm_views is not None and view is not None and any(len(v) for v in sfm_views):
        sel = np.array([view in v for v in sfm_views], bool)
        pts = pts[sel]
    if not len(pts):
        return np.zeros(0), np.zeros(0)
    u, v, depth, front = project(camera, pts)
    ui = np.round(u)
    vi = np.round(v)
    inside = front & (ui >= 0) & (ui < camera.width) & (vi >= 0) & (vi < camera.height)
    ui = ui[inside].astype(int)
    vi = vi[inside].astype(int)
    return mono_depth[vi, ui], depth[inside]


def ransac_align_view(mono_depth, camera, sfm_points, sfm_views=None, view=None, n_iter=1000,
                      threshold=0.05, min_inliers=4, seed=0):
    d, m = view_correspondences(mono_depth, camera, sfm_points, sfm_views, view)
    est = RansacDepthAligner(n_iter, threshold, min_inliers, random_state=np.random.default_rng(seed))
    est.fit(d, m)
    return AffineDepthAlignment(np.float64(est.scale_), np.float64(est.shift_), np.bool_(est.valid_))


def align_bundle(bundle, views=None, seed=0, **kwargs):
    views = range(bundle.n_views) if views is None else views
    return {i: ransac_align_view(bundle.mono_depth[i], bundle.cameras[i], bundle.sfm_points,
                                 bundle.sfm_views, i, seed=seed + i, **kwargs) for i in views}


@dataclass
class RestrictionGrid:
    aabb: np.ndarray
    resolution: tuple
    occupancy: np.ndarray  # bool (nx, ny, nz)
    alignments: dict = field(default_factory=dict)

    @classmethod
    def full(cls, aabb, resolution=(64, 64, 64)):
        res = tuple(int(r) for r in np.broadcast_to(resolution, (3,)))
        return cls(np.asarray(aabb, dtype=np.float64), res, np.ones(res, bool))

    @property
    def voxel_size(self):
        return (self.aabb[1] - self.aabb[0]) / np.asarray(self.resolution)

    def centers(self):
        axes = [self.aabb[0, a] + (np.arange(self.resolution[a]) + 0.5) * self.voxel_size[a] for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, -1)

    def is_permitted(self, x):
        x = np.asarray(x, dtype=np.float64)
        inside = np.all((x >= self.aabb[0]) & (x <= self.aabb[1]), axis=-1)
        idx = np.floor((x - self.aabb[0]) / self.voxel_size).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(self.resolution) - 1)
        return inside & self.occupancy[idx[..., 0], idx[..., 1], idx[..., 2]]

    @property
    def fraction(self):
        return float(self.occupancy.mean())

    def save(self, path):
        header = json.dumps({"aabb": self.aabb.tolist(), "resolution": list(self.resolution)}).encode()
        with open(path, "wb") as f:
            f.write(GRID_MAGIC)
            f.write(struct.pack("<BI", GRID_VERSION, len(header)))
            f.write(header)
            f.write(np.packbits(self.occupancy.reshape(-1)).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            if f.read(4) != GRID_MAGIC:
                raise ValueError(f"{path}: not a restriction grid file")
            version, n = struct.unpack("<BI", f.read(5))
            if version != GRID_VERSION:
                raise ValueError(f"{path}: unsupported grid version {version}")
            header = json.loads(f.read(n))
            bits = np.frombuffer(f.read(), dtype=np.uint8)
        res = tuple(header["resolution"])
        occ = np.unpackbits(bits)[:int(np.prod(res))].astype(bool).reshape(res)
        return cls(np.asarray(header["aabb"]), res, occ)


def label_voxels(centers, cameras, mono_depths, alignments, tolerance=0.2):
    """Union over views of the band ``|z - D| <= tolerance * D`` around aligned depth ``D``."""
    flat = centers.reshape(-1, 3)
    lab = np.zeros(len(flat), bool)
    for i, al in alignments.items():
        if not bool(al.valid):
            continue
        cam = cameras[i]
        u, v, z, front = project(cam, flat)
        ui = np.round(u)
        vi = np.round(v)
        inside = front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        k = np.flatnonzero(inside)
        D = float(al.scale) * mono_depths[i][vi[k].astype(int), ui[k].astype(int)] + float(al.shift)
        lab[k[np.abs(z[k] - D) <= tolerance * D]] = True
    return lab.reshape(centers.shape[:-1])


def build_restriction(bundle, alignments=None, resolution=64, tolerance=0.2, views=None, seed=0):
    """Label voxels whose centers lie within ``tolerance`` of any aligned monocular depth map."""
    if alignments is None:
        alignments = align_bundle(bundle, views, seed=seed)
    elif views is not None:
        alignments = {i: alignments[i] for i in views}
    if not any(bool(a.valid) for a in alignments.values()):
        raise NoValidAlignmentError("no view has a valid monocular depth alignment")
    grid = RestrictionGrid.full(bundle.scene_aabb, resolution)
    grid.occupancy = label_voxels(grid.centers(), bundle.cameras, bundle.mono_depth, alignments, tolerance)
    grid.alignments = dict(alignments)
    return grid
