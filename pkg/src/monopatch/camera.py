"""Pinhole cameras, rays and pixel patches.

Conventions used throughout the package:

* poses are camera-to-world, ``X_world = R @ X_cam + t``;
* camera axes are x-right, y-down, z-forward;
* pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``;
* "depth" is the Euclidean distance along the ray, never z-depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PoseValidityError(ValueError):
    """Raised when a camera rotation is not a proper orthonormal matrix."""


class RayMissError(ValueError):
    """Raised when a ray does not intersect the scene bounding box."""


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        check_rotation(R)

    @property
    def center(self) -> np.ndarray:
        return self.t

    @classmethod
    def look_at(cls, eye, target, *, width, height, fov_x_deg=60.0, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        f = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, R, eye)

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "R": [float(x) for x in self.R.reshape(-1)],
            "t": [float(x) for x in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["R"], dtype=np.float64).reshape(3, 3), np.asarray(d["t"]))


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise PoseValidityError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        raise PoseValidityError("rotation is not orthonormal")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise PoseValidityError(f"rotation determinant is {det:+.6f}, expected +1")


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


def pixel_directions(camera: Camera, u, v) -> np.ndarray:
    """Unit world-frame directions through pixel centers ``(u, v)``.

    ``u`` and ``v`` may be fractional; arrays broadcast.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + 0.5 - camera.cx) / camera.fx
    y = (v + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack(np.broadcast_arrays(x, y, np.ones_like(x)), axis=-1)
    d = d_cam @ camera.R.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_aabb(origins, directions, aabb):
    """Slab intersection. Returns ``(t_near, t_far, hit)`` with ``t_near >= 0``."""
    aabb = np.asarray(aabb, dtype=np.float64)
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (aabb[0] - o) * inv
        t1 = (aabb[1] - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far, t_far > t_near


def pixel_to_ray(camera: Camera, u: float, v: float, aabb) -> Ray:
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside a {camera.width}x{camera.height} image")
    d = pixel_directions(camera, u, v)
    t_near, t_far, hit = ray_aabb(camera.center, d, aabb)
    if not hit:
        raise RayMissError(f"ray through pixel ({u}, {v}) misses the scene box")
    return Ray(camera.center.copy(), d, float(t_near), float(t_far))


def unproject(camera: Camera, u, v, depth) -> np.ndarray:
    return camera.center + np.asarray(depth, dtype=np.float64)[..., None] * pixel_directions(camera, u, v)


def project(camera: Camera, X):
    """Project world points.

    Returns ``(u, v, depth, in_front)`` where ``u, v`` are continuous pixel
    coordinates (so that integer values sit on pixel centers), ``depth`` is the
    distance to the camera center, and ``in_front`` is False for points with
    camera-frame ``z <= 0``. Scalar input gives ``None`` for behind-camera points.
    """
    X = np.asarray(X, dtype=np.float64)
    rel = X - camera.center
    Xc = rel @ camera.R
    z = Xc[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * Xc[..., 0] / z + camera.cx - 0.5
        v = camera.fy * Xc[..., 1] / z + camera.cy - 0.5
    depth = np.linalg.norm(rel, axis=-1)
    if X.ndim == 1:
        if not in_front:
            return None
        return float(u), float(v), float(depth)
    return u, v, depth, in_front


@dataclass(frozen=True)
class PixelPatch:
    view: int
    u0: int
    v0: int
    size: int = 8

    def pixel_grid(self):
        """Integer ``(u, v)`` arrays of shape ``(size, size)``, row-major (v, u)."""
        vv, uu = np.mgrid[self.v0:self.v0 + self.size, self.u0:self.u0 + self.size]
        return uu, vv

    def rays(self, camera: Camera, aabb):
        uu, vv = self.pixel_grid()
        d = pixel_directions(camera, uu, vv).reshape(-1, 3)
        o = np.broadcast_to(camera.center, d.shape).copy()
        t_near, t_far, hit = ray_aabb(o, d, aabb)
        return o, d, t_near, t_far, hit


class PatchSampler:
    """Draws square patches (or scattered pixels) from one view at a time.

    Views are visited round-robin: call ``view_for_step`` with the global
    training step to get the view of that step.
    """

    def __init__(self, views, width, height, size=8):
        if size > width or size > height:
            raise ValueError(f"patch side {size} exceeds image {width}x{height}")
        self.views = list(views)
        if not self.views:
            raise ValueError("no views to sample from")
        self.width = width
        self.height = height
        self.size = size

    def view_for_step(self, step):
        return self.views[step % len(self.views)]

    def sample(self, rng, count, view):
        if count < 1:
            raise ValueError("count must be >= 1")
        nu = self.width - self.size + 1
        nv = self.height - self.size + 1
        u0 = rng.integers(0, nu, size=count)
        v0 = rng.integers(0, nv, size=count)
        return [PixelPatch(view, int(a), int(b), self.size) for a, b in zip(u0, v0)]

    def sample_pixels(self, rng, count, view):
        """``count`` groups of ``size**2`` independent random pixels, shaped like patches."""
        n = count * self.size * self.size
        u = rng.integers(0, self.width, size=n).reshape(count, self.size, self.size)
        v = rng.integers(0, self.height, size=n).reshape(count, self.size, self.size)
        return u, v


def sample_patches(bundle, rng, count, *, view, size=8):
    cam = bundle.cameras[view]
    return PatchSampler([view], cam.width, cam.height, size).sample(rng, count, view)
