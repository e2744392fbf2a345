"""Differentiable ray marching with stratified samples and an optional restriction grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import ray_aabb

BACKGROUND = 0.5
DEPTH_EPS = 1e-4
NORMAL_MIN_OPACITY = 1e-3


@dataclass(frozen=True)
class StepSpec:
    step: float | None = None  # None: AABB diagonal / divisions
    divisions: int = 512
    jitter: bool = True
    normal_weight_cutoff: float = 0.0  # skip gradient normals on samples with smaller weight

    def resolve(self, aabb):
        if self.step is not None:
            return float(self.step)
        aabb = np.asarray(aabb, dtype=np.float64)
        return float(np.linalg.norm(aabb[1] - aabb[0]) / self.divisions)


@dataclass
class RenderResult:
    """Per-ray outputs; arrays have a leading ray axis."""

    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    depth_valid: np.ndarray
    normal_grad: np.ndarray | None
    normal_mlp: np.ndarray | None
    normal_valid: np.ndarray | None
    tape: "RenderTape | None" = None

    def __len__(self):
        return len(self.depth)

    def reshape(self, shape):
        def r(a, extra=()):
            return None if a is None else a.reshape(tuple(shape) + extra)
        return RenderResult(r(self.color, (3,)), r(self.depth), r(self.opacity), r(self.depth_valid),
                            r(self.normal_grad, (3,)), r(self.normal_mlp, (3,)), r(self.normal_valid),
                            self.tape)


@dataclass
class RenderTape:
    ray_idx: np.ndarray
    smp_idx: np.ndarray
    t: np.ndarray          # (R, S)
    delta: float
    weights: np.ndarray    # (R, S)
    trans_next: np.ndarray  # (R, S) transmittance after each sample
    opacity: np.ndarray
    depth_num: np.ndarray
    color_s: np.ndarray    # (M, 3) per touched sample
    n_mlp_s: np.ndarray | None
    n_grad_s: np.ndarray | None
    grad_sel: np.ndarray | None  # touched-sample indices that carry gradient normals
    N_grad: np.ndarray | None    # unnormalized rendered normals
    N_mlp: np.ndarray | None
    field_tape: object
    normal_tape: object
    consumed: bool = False


def sample_positions(origins, dirs, t_near, t_far, delta, rng=None):
    """Stratified sample distances ``t`` (R, S) and validity mask."""
    n = np.ceil(np.maximum(t_far - t_near, 0) / delta).astype(np.int64)
    S = max(int(n.max(initial=0)), 1)
    base = np.arange(S, dtype=np.float64)[None, :]
    if rng is None:
        jit = np.full((len(origins), S), 0.5)
    else:
        jit = rng.random((len(origins), S))
    t = t_near[:, None] + (base + jit) * delta
    valid = t < t_far[:, None]
    return t, valid


def render_rays(field, origins, dirs, t_near, t_far, step, restriction=None, rng=None,
                normals=True, keep_tape=True, background=BACKGROUND):
    """Render a batch of rays.

    ``field`` is anything with the :class:`~monopatch.field.RadianceField`
    ``forward`` / ``gradient_normals`` / ``backward`` interface.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_near = np.asarray(t_near, dtype=np.float64).reshape(-1)
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1)
    R = len(origins)
    delta = step.resolve(field.aabb) if isinstance(step, StepSpec) else float(step)
    t, valid = sample_positions(origins, dirs, t_near, t_far, delta, rng)
    ray_idx, smp_idx = np.nonzero(valid)
    X = origins[ray_idx] + t[ray_idx, smp_idx, None] * dirs[ray_idx]
    if restriction is not None and len(X):
        keep = restriction.is_permitted(X)
        ray_idx, smp_idx, X = ray_idx[keep], smp_idx[keep], X[keep]
    S = t.shape[1]

    heads = ("color", "normal") if normals else ("color",)
    out, ftape = field.forward(X, dirs[ray_idx], heads=heads)
    sigma = np.zeros((R, S))
    sigma[ray_idx, smp_idx] = out["sigma"]
    alpha = -np.expm1(-sigma * delta)
    trans_next = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((R, 1)), trans_next[:, :-1]], axis=1)
    w = trans * alpha
    opacity = w.sum(axis=1)
    color_s = out["color"]
    w_s = w[ray_idx, smp_idx]
    color = segment_sum(ray_idx, w_s[:, None] * color_s, R)
    color += (1.0 - opacity)[:, None] * background
    depth_num = (w * t).sum(axis=1)
    depth = depth_num / np.maximum(opacity, DEPTH_EPS)
    depth_valid = opacity > 0

    n_grad = n_mlp = n_valid = None
    n_mlp_s = n_grad_s = grad_sel = N_grad = N_mlp = ntape = None
    if normals:
        n_mlp_s = out["normal"]
        N_mlp = segment_sum(ray_idx, w_s[:, None] * n_mlp_s, R)
        grad_sel = np.flatnonzero(w_s > step.normal_weight_cutoff) if isinstance(step, StepSpec) \
            else np.flatnonzero(w_s > 0)
        n_grad_s, _, ntape = field.gradient_normals(X[grad_sel])
        N_grad = segment_sum(ray_idx[grad_sel], w_s[grad_sel, None] * n_grad_s, R)
        n_grad, ok_g = _unit(N_grad)
        n_mlp, ok_m = _unit(N_mlp)
        n_valid = (opacity >= NORMAL_MIN_OPACITY) & ok_g & ok_m
    tape = None
    if keep_tape:
        tape = RenderTape(ray_idx, smp_idx, t, delta, w, trans_next, opacity, depth_num, color_s,
                          n_mlp_s, n_grad_s, grad_sel, N_grad, N_mlp, ftape, ntape)
    return RenderResult(color, depth, opacity, depth_valid, n_grad, n_mlp, n_valid, tape)


def segment_sum(index, values, n):
    """Row sums of ``values`` grouped by ``index`` (in input order, so deterministic)."""
    return np.stack([np.bincount(index, weights=values[:, c], minlength=n) for c in range(values.shape[1])],
                    axis=1).astype(np.float64, copy=False)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n[..., 0] > 1e-12
    return v / np.where(ok[..., None], n, 1.0), ok


def _unit_backward(v, dn):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n > 1e-12
    nh = v / np.where(ok, n, 1.0)
    dv = (dn - nh * (nh * dn).sum(-1, keepdims=True)) / np.where(ok, n, 1.0)
    return np.where(ok, dv, 0.0)


def render_backward(field, tape: RenderTape, d_color=None, d_depth=None, d_normal_grad=None,
                    d_normal_mlp=None, background=BACKGROUND, defer=False):
    """Exact reverse pass of :func:`render_rays` into the field parameters.

    Returns a list of gradient records when ``defer`` is set.
    """
    if tape is None:
        raise RuntimeError("render_backward needs a forward tape")
    if tape.consumed:
        raise RuntimeError("render tape already consumed")
    tape.consumed = True
    R, S = tape.weights.shape
    ri, si = tape.ray_idx, tape.smp_idx
    dw = np.zeros((R, S))
    d_opacity = np.zeros(R)
    d_color_s = None
    d_nmlp_s = None
    d_ngrad_s = None
    if d_color is not None:
        d_color = np.asarray(d_color, dtype=np.float64).reshape(R, 3)
        dw[ri, si] += (tape.color_s * d_color[ri]).sum(1)
        d_color_s = tape.weights[ri, si, None] * d_color[ri]
        d_opacity -= background * d_color.sum(1)
    if d_depth is not None:
        d_depth = np.asarray(d_depth, dtype=np.float64).reshape(R)
        denom = np.maximum(tape.opacity, DEPTH_EPS)
        dw += tape.t * (d_depth / denom)[:, None]
        d_opacity -= np.where(tape.opacity > DEPTH_EPS, tape.depth_num / denom ** 2, 0.0) * d_depth
    if d_normal_mlp is not None:
        dN = _unit_backward(tape.N_mlp, np.asarray(d_normal_mlp, dtype=np.float64).reshape(R, 3))
        dw[ri, si] += (tape.n_mlp_s * dN[ri]).sum(1)
        d_nmlp_s = tape.weights[ri, si, None] * dN[ri]
    if d_normal_grad is not None:
        dN = _unit_backward(tape.N_grad, np.asarray(d_normal_grad, dtype=np.float64).reshape(R, 3))
        sel = tape.grad_sel
        rs, ss = ri[sel], si[sel]
        dw[rs, ss] += (tape.n_grad_s * dN[rs]).sum(1)
        d_ngrad_s = tape.weights[rs, ss, None] * dN[rs]
    dw += d_opacity[:, None]

    # w_i = T_i * alpha_i with s_i = sigma_i * delta:
    # dL/ds_i = T_{i+1} g_i - sum_{k>i} w_k g_k
    wg = tape.weights * dw
    tail = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg
    ds = tape.trans_next * dw - tail
    d_sigma_s = ds[ri, si] * tape.delta

    records = []
    rec = field.backward(tape.field_tape, d_sigma=d_sigma_s, d_color=d_color_s,
                         d_normal=d_nmlp_s, defer=defer)
    records.append(rec)
    if d_ngrad_s is not None and tape.normal_tape is not None and len(tape.grad_sel):
        records.append(field.gradient_normals_backward(tape.normal_tape, d_ngrad_s, defer=defer))
    return records if defer else None


def render_ray(field, origin, direction, t_near, t_far, step, restriction=None, rng=None, normals=True):
    return render_rays(field, np.asarray(origin)[None], np.asarray(direction)[None], [t_near], [t_far],
                       step, restriction, rng, normals)


def render_patch(field, camera, patch, aabb, step, restriction=None, rng=None, normals=True):
    """Render one :class:`~monopatch.camera.PixelPatch`; result arrays are (k, k, ...)."""
    o, d, tn, tf, hit = patch.rays(camera, aabb)
    tf = np.where(hit, tf, tn)
    res = render_rays(field, o, d, tn, tf, step, restriction, rng, normals)
    return res.reshape((patch.size, patch.size))


def camera_rays(camera, aabb, u, v):
    from .camera import pixel_directions
    d = pixel_directions(camera, u, v).reshape(-1, 3)
    o = np.broadcast_to(camera.center, d.shape).copy()
    tn, tf, hit = ray_aabb(o, d, aabb)
    return o, d, tn, np.where(hit, tf, tn)


def render_image(field, camera, aabb, step, restriction=None, normals=True, chunk=4096):
    """Full-frame render without tapes. Returns dict of (H, W, ...) maps."""
    vv, uu = np.mgrid[0:camera.height, 0:camera.width]
    o, d, tn, tf = camera_rays(camera, aabb, uu.ravel(), vv.ravel())
    parts = []
    for s in range(0, len(o), chunk):
        sl = slice(s, s + chunk)
        parts.append(render_rays(field, o[sl], d[sl], tn[sl], tf[sl], step, restriction, None,
                                 normals, keep_tape=False))
    H, W = camera.height, camera.width

    def cat(name, extra=()):
        vals = [getattr(p, name) for p in parts]
        if vals[0] is None:
            return None
        return np.concatenate(vals).reshape((H, W) + extra)

    return {"color": cat("color", (3,)), "depth": cat("depth"), "opacity": cat("opacity"),
            "normal_grad": cat("normal_grad", (3,)), "normal_mlp": cat("normal_mlp", (3,))}
