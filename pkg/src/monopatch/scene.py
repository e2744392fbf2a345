"""Scene data model and the synthetic scene / cue / SfM simulators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, pixel_directions, project

LIGHT_DIR = np.array([0.35, -0.45, 0.82]) / np.linalg.norm([0.35, -0.45, 0.82])
AMBIENT = 0.35


# --------------------------------------------------------------------------- primitives

@dataclass(frozen=True)
class Primitive:
    albedo: tuple = (0.8, 0.8, 0.8)
    texture: str = "flat"  # flat | checker | noise
    texture_scale: float = 4.0

    def shade(self, X, n):
        albedo = np.asarray(self.albedo)
        if self.texture == "checker":
            k = np.floor(X * self.texture_scale).astype(np.int64).sum(axis=-1) % 2
            tex = np.where(k == 0, 1.0, 0.45)
        elif self.texture == "noise":
            s = self.texture_scale
            tex = 0.5 + 0.5 * (
                0.5 * np.sin(s * 2.1 * X[..., 0] + 1.3) * np.sin(s * 1.7 * X[..., 1] + 0.4)
                + 0.3 * np.sin(s * 3.3 * X[..., 2] + s * 2.9 * X[..., 0] + 2.0)
                + 0.2 * np.sin(s * 5.1 * X[..., 1] - s * 4.3 * X[..., 2])
            )
        else:
            tex = np.ones(X.shape[:-1])
        lam = AMBIENT + (1 - AMBIENT) * np.abs(n @ LIGHT_DIR)
        return np.clip(albedo * (tex * lam)[..., None], 0.0, 1.0)


@dataclass(frozen=True)
class Plane(Primitive):
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)

    def intersect(self, o, d):
        p = np.asarray(self.point)
        n = np.asarray(self.normal) / np.linalg.norm(self.normal)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((p - o) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        nrm = np.where((denom < 0)[..., None], n, -n)
        return t, np.broadcast_to(nrm, d.shape)

    def area_sample(self, rng, density, aabb):
        # Only axis-aligned planes are sampled (clipped to the box).
        n = np.abs(np.asarray(self.normal, dtype=np.float64))
        axis = int(np.argmax(n))
        others = [a for a in range(3) if a != axis]
        lo, hi = np.asarray(aabb[0]), np.asarray(aabb[1])
        area = np.prod(hi[others] - lo[others])
        count = rng.poisson(area * density)
        pts = np.empty((count, 3))
        pts[:, axis] = self.point[axis]
        for a in others:
            pts[:, a] = rng.uniform(lo[a], hi[a], count)
        return pts


@dataclass(frozen=True)
class Box(Primitive):
    center: tuple = (0.0, 0.0, 0.0)
    half: tuple = (0.5, 0.5, 0.5)
    inverted: bool = False  # rays start inside and hit the walls

    def intersect(self, o, d):
        c = np.asarray(self.center)
        h = np.asarray(self.half)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (c - h - o) * inv
            t1 = (c + h - o) * inv
        tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
        t_in = tmin.max(axis=-1)
        t_out = tmax.min(axis=-1)
        ok = t_out >= np.maximum(t_in, 0)
        if self.inverted:
            t = np.where(ok & (t_out > 1e-9), t_out, np.inf)
            axis = np.argmin(tmax, axis=-1)
            sign = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
        else:
            t = np.where(ok & (t_in > 1e-9), t_in, np.inf)
            axis = np.argmax(tmin, axis=-1)
            sign = -np.sign(np.take_along_axis(d, axis[..., None], -1)[..., 0])
        nrm = np.zeros(d.shape)
        np.put_along_axis(nrm, axis[..., None], sign[..., None], -1)
        return t, nrm

    def area_sample(self, rng, density, aabb=None):
        c = np.asarray(self.center)
        h = np.asarray(self.half)
        out = []
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            area = 4 * h[others[0]] * h[others[1]]
            for s in (-1, 1):
                count = rng.poisson(area * density)
                pts = np.empty((count, 3))
                pts[:, axis] = c[axis] + s * h[axis]
                for a in others:
                    pts[:, a] = rng.uniform(c[a] - h[a], c[a] + h[a], count)
                out.append(pts)
        return np.concatenate(out)


@dataclass(frozen=True)
class Sphere(Primitive):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5

    def intersect(self, o, d):
        c = np.asarray(self.center)
        oc = o - c
        b = (oc * d).sum(-1)
        cc = (oc * oc).sum(-1) - self.radius ** 2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0))
        t = -b - sq
        t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        X = o + np.where(np.isfinite(t), t, 0)[..., None] * d
        nrm = (X - c) / self.radius
        return t, nrm

    def area_sample(self, rng, density, aabb=None):
        count = rng.poisson(4 * np.pi * self.radius ** 2 * density)
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * u


def cast_rays(primitives, o, d):
    """First hit against a list of primitives: ``(t, normal, primitive_index)``."""
    o = np.broadcast_to(np.asarray(o, dtype=np.float64), np.shape(d))
    best_t = np.full(d.shape[:-1], np.inf)
    best_n = np.zeros(d.shape)
    best_i = np.full(d.shape[:-1], -1)
    for i, prim in enumerate(primitives):
        t, n = prim.intersect(o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_i = np.where(closer, i, best_i)
    return best_t, best_n, best_i


def shade_hits(primitives, X, n, idx, background=0.5):
    rgb = np.full(X.shape, background)
    for i, prim in enumerate(primitives):
        m = idx == i
        if m.any():
            rgb[m] = prim.shade(X[m], n[m])
    return rgb


# --------------------------------------------------------------------------- data model

@dataclass
class GroundTruth:
    depth: list
    normal: list
    points: np.ndarray
    primitives: tuple
    cue_affine: list = field(default_factory=list)  # per-view (a, b) used by the cue simulator
    point_density: float = 0.0

    def ray_depth(self, o, d):
        t, _, _ = cast_rays(self.primitives, o, d)
        return t


@dataclass
class SceneBundle:
    images: list
    cameras: list
    mono_depth: list
    mono_normal: list
    sfm_points: np.ndarray
    sfm_views: list
    scene_aabb: np.ndarray
    sfm_outlier: np.ndarray | None = None

    def __post_init__(self):
        self.scene_aabb = np.asarray(self.scene_aabb, dtype=np.float64).reshape(2, 3)
        self.sfm_points = np.asarray(self.sfm_points, dtype=np.float64).reshape(-1, 3)
        n = len(self.cameras)
        if n < 1:
            raise ValueError("a scene needs at least one view")
        for name in ("images", "mono_depth", "mono_normal"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} cameras")
        if len(self.sfm_views) != len(self.sfm_points):
            raise ValueError("sfm_views must have one entry per SfM point")
        if not self.scene_width > 0:
            raise ValueError("scene box must have positive extent")

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def scene_width(self):
        return float(np.max(self.scene_aabb[1] - self.scene_aabb[0]))

    def validate(self, min_views=2):
        if self.n_views < min_views:
            raise ValueError(f"need at least {min_views} views, got {self.n_views}")
        for i, (img, cam, md, mn) in enumerate(
                zip(self.images, self.cameras, self.mono_depth, self.mono_normal)):
            hw = (cam.height, cam.width)
            if img.shape != hw + (3,) or md.shape != hw or mn.shape != hw + (3,):
                raise ValueError(f"view {i}: image/cue dimensions do not match camera {hw}")
            nn = np.linalg.norm(mn, axis=-1)
            if np.abs(nn - 1).max() > 1e-4:
                raise ValueError(f"view {i}: monocular normals are not unit length")
        lo, hi = self.scene_aabb
        if len(self.sfm_points) and not np.all((self.sfm_points >= lo - 1e-9) & (self.sfm_points <= hi + 1e-9)):
            raise ValueError("SfM points outside the scene box")
        return self


# --------------------------------------------------------------------------- generators

@dataclass(frozen=True)
class SceneSpec:
    kind: str = "box"  # box | plane
    n_primitives: int = 4
    texture: str = "mixed"
    n_views: int = 12
    width: int = 96
    height: int = 64
    ring_radius: float = 1.3
    ring_height: float = 1.1
    fov_x_deg: float = 60.0
    point_density: float = 600.0

    @classmethod
    def preset(cls, name, **overrides):
        if name == "box":
            return cls(**overrides)
        if name == "plane":
            base = dict(kind="plane", n_primitives=1, texture="flat", n_views=1)
            base.update(overrides)
            return cls(**base)
        raise ValueError(f"unknown scene preset {name!r}")


def _box_scene(spec: SceneSpec, rng):
    aabb = np.array([[-2.0, -2.0, -0.2], [2.0, 2.0, 2.6]])
    tex = (lambda t: t) if spec.texture != "mixed" else None
    # walls sit inside the box; the room floor is hidden under the floor plane.
    # Their tone stays clear of the mid-gray render background so empty space cannot explain them.
    room = Box(albedo=(0.98, 0.95, 0.86), texture="flat" if tex is None else spec.texture,
               center=(0.0, 0.0, 1.2), half=(1.9, 1.9, 1.3), inverted=True)
    floor = Plane(albedo=(0.85, 0.8, 0.7), texture="checker" if tex is None else spec.texture,
                  texture_scale=2.5, point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))
    prims = [room, floor]
    palette = [(0.8, 0.35, 0.3), (0.3, 0.6, 0.8), (0.4, 0.75, 0.35), (0.85, 0.75, 0.3),
               (0.6, 0.4, 0.75), (0.9, 0.55, 0.2)]
    n_obj = max(spec.n_primitives - 2, 0)
    angles = rng.uniform(0, 2 * np.pi) + np.arange(n_obj) * 2 * np.pi / max(n_obj, 1)
    for k in range(n_obj):
        r = rng.uniform(0.2, 0.6)
        cx, cy = r * np.cos(angles[k]), r * np.sin(angles[k])
        albedo = palette[k % len(palette)]
        texture = "noise" if tex is None else spec.texture
        if k % 3 == 2:
            rad = rng.uniform(0.2, 0.3)
            prims.append(Sphere(albedo=albedo, texture=texture, texture_scale=6.0,
                                center=(cx, cy, rad), radius=rad))
        else:
            h = rng.uniform(0.15, 0.3, size=3)
            h[2] = rng.uniform(0.2, 0.45)
            prims.append(Box(albedo=albedo, texture=texture, texture_scale=6.0,
                             center=(cx, cy, h[2]), half=tuple(h)))
    cams = []
    for i in range(spec.n_views):
        a = 2 * np.pi * i / spec.n_views
        eye = np.array([spec.ring_radius * np.cos(a), spec.ring_radius * np.sin(a), spec.ring_height])
        target = np.array([0.0, 0.0, 0.25]) - 0.9 * np.array([np.cos(a), np.sin(a), 0.0])
        cams.append(Camera.look_at(eye, target, width=spec.width, height=spec.height,
                                   fov_x_deg=spec.fov_x_deg))
    return tuple(prims), cams, aabb


def _plane_scene(spec: SceneSpec, rng):
    aabb = np.array([[-2.0, -2.0, -0.5], [2.0, 2.0, 2.0]])
    prims = (Plane(albedo=(1.0, 1.0, 1.0), texture=spec.texture if spec.texture != "mixed" else "flat",
                   point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0)),)
    cams = []
    for i in range(spec.n_views):
        off = 0.15 * i
        eye = np.array([off, 0.0, 1.0])
        cams.append(Camera.look_at(eye, eye - np.array([0, 0, 1.0]), width=spec.width,
                                   height=spec.height, fov_x_deg=spec.fov_x_deg, up=(0, 1, 0)))
    return prims, cams, aabb


def render_ground_truth(primitives, camera, background=0.5):
    vv, uu = np.mgrid[0:camera.height, 0:camera.width]
    d = pixel_directions(camera, uu, vv)
    t, n, idx = cast_rays(primitives, camera.center, d)
    hit = np.isfinite(t)
    X = camera.center + np.where(hit, t, 0)[..., None] * d
    rgb = shade_hits(primitives, X, n, idx, background)
    return rgb, np.where(hit, t, 0.0), n


def visible_mask(primitives, cameras, X, rel_tol=1e-7):
    """Points that are the first hit of the ray from at least one camera and project in-frame."""
    vis = np.zeros(len(X), dtype=bool)
    for cam in cameras:
        u, v, depth, front = project(cam, X)
        inside = front & (u >= -0.5) & (u < cam.width - 0.5) & (v >= -0.5) & (v < cam.height - 0.5)
        if not inside.any():
            continue
        d = X[inside] - cam.center
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t, _, _ = cast_rays(primitives, cam.center, d)
        ok = np.abs(t - depth[inside]) <= rel_tol * np.maximum(depth[inside], 1.0)
        vis[np.flatnonzero(inside)[ok]] = True
    return vis


def generate_synthetic_scene(spec: SceneSpec | str = "box", seed: int = 0):
    """Ray-cast a synthetic scene.

    Returns ``(bundle, gt)``. Monocular cues in the bundle are exact copies of
    the ground truth (call :func:`simulate_monocular_cues` to corrupt them) and
    the SfM list is empty (see :func:`simulate_sfm_points`).
    """
    if isinstance(spec, str):
        spec = SceneSpec.preset(spec)
    if spec.n_primitives < 1:
        raise ValueError("scene spec needs at least one primitive")
    if spec.n_views < 1:
        raise ValueError("scene spec needs at least one view")
    rng = np.random.default_rng(seed)
    if spec.kind == "box":
        prims, cams, aabb = _box_scene(spec, rng)
    elif spec.kind == "plane":
        prims, cams, aabb = _plane_scene(spec, rng)
    else:
        raise ValueError(f"unknown scene kind {spec.kind!r}")

    images, depths, normals = [], [], []
    for cam in cams:
        rgb, depth, n = render_ground_truth(prims, cam)
        images.append(np.round(rgb * 255) / 255)  # 8-bit exact, so PNG storage is lossless
        depths.append(depth)
        normals.append(n)

    pts = np.concatenate([p.area_sample(rng, spec.point_density, aabb) for p in prims])
    lo, hi = aabb
    pts = pts[np.all((pts >= lo - 1e-9) & (pts <= hi + 1e-9), axis=1)]
    # drop samples buried inside other primitives (e.g. box bottoms on the floor)
    pts = pts[visible_mask(prims, cams, pts)]

    bundle = SceneBundle(images=images, cameras=cams, mono_depth=[d.copy() for d in depths],
                         mono_normal=[n.copy() for n in normals], sfm_points=np.zeros((0, 3)),
                         sfm_views=[], scene_aabb=aabb)
    gt = GroundTruth(depth=depths, normal=normals, points=pts, primitives=prims,
                     cue_affine=[(1.0, 0.0)] * len(cams), point_density=spec.point_density)
    return bundle, gt


@dataclass(frozen=True)
class CueSpec:
    scale_range: tuple = (0.5, 2.0)
    shift_range: tuple = (-0.2, 0.2)  # fraction of scene width
    warp_amplitude: float = 0.1
    normal_noise_deg: float = 5.0
    fixed_scale: float | None = None
    fixed_shift: float | None = None  # fraction of scene width

    @classmethod
    def exact(cls):
        return cls(fixed_scale=1.0, fixed_shift=0.0, warp_amplitude=0.0, normal_noise_deg=0.0)


def smooth_warp(height, width, amplitude, rng):
    """Multiplicative field ``1 + amplitude * mean of 3 low-frequency cosines``."""
    vv, uu = np.mgrid[0:height, 0:width]
    w = np.zeros((height, width))
    for _ in range(3):
        theta = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi * freq / max(height, width)
        w += np.cos(k * (np.cos(theta) * uu + np.sin(theta) * vv) + phase)
    return 1.0 + amplitude * w / 3.0


def _perturb_normals(n, angle_deg_max, rng):
    """Rotate each normal about a random perpendicular axis by U(0, angle_deg_max) degrees."""
    if angle_deg_max <= 0:
        return n.copy()
    shape = n.shape
    n = n.reshape(-1, 3)
    r = rng.normal(size=n.shape)
    axis = r - (r * n).sum(1, keepdims=True) * n
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = np.deg2rad(rng.uniform(0, angle_deg_max, size=len(n)))[:, None]
    # rotation of n about an axis perpendicular to it
    out = n * np.cos(ang) + np.cross(axis, n) * np.sin(ang)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(shape)


def simulate_monocular_cues(bundle: SceneBundle, gt: GroundTruth, cues: CueSpec = CueSpec(), seed=0):
    """Corrupt the ground truth into locally consistent monocular cues.

    Depth becomes ``(a * d_true + b) * w(u, v)`` with a per-view affine pair and
    smooth warp ``w``; normals are rotated by a random angle whose mean equals
    ``normal_noise_deg``. Returns a new bundle and records the per-view
    ``(a, b)`` in ``gt.cue_affine``.
    """
    rng = np.random.default_rng(seed)
    sw = bundle.scene_width
    depths, normals, affine = [], [], []
    for d, n in zip(gt.depth, gt.normal):
        a = cues.fixed_scale if cues.fixed_scale is not None else rng.uniform(*cues.scale_range)
        b = (cues.fixed_shift if cues.fixed_shift is not None else rng.uniform(*cues.shift_range)) * sw
        w = smooth_warp(*d.shape, cues.warp_amplitude, rng)
        mono = (a * d + b) * w
        depths.append(mono)
        normals.append(_perturb_normals(n, 2 * cues.normal_noise_deg, rng))
        affine.append((float(a), float(b)))
    gt.cue_affine = affine
    return SceneBundle(images=bundle.images, cameras=bundle.cameras, mono_depth=depths,
                       mono_normal=normals, sfm_points=bundle.sfm_points, sfm_views=bundle.sfm_views,
                       scene_aabb=bundle.scene_aabb, sfm_outlier=bundle.sfm_outlier)


def observing_views(cameras, X, primitives=None, rel_tol=1e-6):
    views = [[] for _ in range(len(X))]
    for i, cam in enumerate(cameras):
        u, v, depth, front = project(cam, X)
        inside = front & (u >= -0.5) & (u < cam.width - 0.5) & (v >= -0.5) & (v < cam.height - 0.5)
        if primitives is not None and inside.any():
            d = X[inside] - cam.center
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            t, _, _ = cast_rays(primitives, cam.center, d)
            occluded = t < depth[inside] * (1 - rel_tol)
            inside[np.flatnonzero(inside)[occluded]] = False
        for j in np.flatnonzero(inside):
            views[j].append(i)
    return views


def simulate_sfm_points(bundle: SceneBundle, gt: GroundTruth, count=300, noise_sigma=0.0,
                        outlier_fraction=0.0, seed=0):
    """Noisy sparse points drawn from the visible ground-truth surface plus uniform outliers.

    Inlier observing views are cameras that see the clean surface sample
    unoccluded; outliers are observed by every camera they project into.
    """
    if count < 10:
        raise ValueError("count must be >= 10")
    if not 0 <= outlier_fraction <= 0.5:
        raise ValueError("outlier_fraction must lie in [0, 0.5]")
    rng = np.random.default_rng(seed)
    n_out = int(round(outlier_fraction * count))
    n_in = count - n_out
    lo, hi = bundle.scene_aabb
    clean = gt.points[rng.choice(len(gt.points), size=n_in, replace=n_in > len(gt.points))]
    noisy = np.clip(clean + rng.normal(scale=noise_sigma, size=clean.shape), lo, hi)
    outliers = rng.uniform(lo, hi, size=(n_out, 3))
    views = observing_views(bundle.cameras, clean, gt.primitives) + observing_views(bundle.cameras, outliers)
    pts = np.concatenate([noisy, outliers])
    flags = np.concatenate([np.zeros(n_in, bool), np.ones(n_out, bool)])
    out = SceneBundle(images=bundle.images, cameras=bundle.cameras, mono_depth=bundle.mono_depth,
                      mono_normal=bundle.mono_normal, sfm_points=pts, sfm_views=views,
                      scene_aabb=bundle.scene_aabb, sfm_outlier=flags)
    return out, clean


def make_scene(preset="box", seed=0, cues: CueSpec | None = None, sfm_count=400,
               sfm_noise=0.002, sfm_outliers=0.1, **spec_overrides):
    """Scene + corrupted cues + SfM points in one call (the CLI ``synth`` pipeline)."""
    spec = SceneSpec.preset(preset, **spec_overrides) if isinstance(preset, str) else preset
    bundle, gt = generate_synthetic_scene(spec, seed)
    bundle = simulate_monocular_cues(bundle, gt, cues if cues is not None else CueSpec(), seed + 1)
    bundle, _ = simulate_sfm_points(bundle, gt, sfm_count, sfm_noise * bundle.scene_width,
                                    sfm_outliers, seed + 2)
    return bundle, gt


def simulate_mvs_depth(gt: GroundTruth, rel_noise=0.005, dropout=0.3, seed=0):
    """Stand-in MVS depth: ground truth with multiplicative noise and random holes (0 = no estimate)."""
    rng = np.random.default_rng(seed)
    out = []
    for d in gt.depth:
        noisy = d * (1.0 + rel_noise * rng.standard_normal(d.shape))
        keep = np.isfinite(d) & (d > 0) & (rng.random(d.shape) >= dropout)
        out.append(np.where(keep, noisy, 0.0))
    return out
