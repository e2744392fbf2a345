"""Patch losses with hand-written adjoints.

Every loss accepts one patch (``k x k`` leading shape) or a batch of patches
(``P x k x k``). The returned value is the mean of the per-patch losses and the
returned adjoint is the derivative of that mean with respect to the rendered
input. Patches that a loss cannot use (too few valid pixels, invalid
alignment) contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

HUBER_DELTA = 0.1
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
NCC_EPS = 1e-8
MIN_MASKED = 4


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    depth: float = 0.05
    grad_depth: float = 0.025
    normal: float = 1e-3
    grad_normal: float = 5e-4
    ssim: float = 1e-4
    ncc: float = 1e-4
    mvs: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _batched(*arrays, ndim):
    """Add a leading patch axis when given a single patch."""
    single = np.ndim(arrays[0]) == ndim
    out = [None if a is None else np.asarray(a, dtype=np.float64)[None] if single
           else np.asarray(a, dtype=np.float64) for a in arrays]
    return single, out


def _unbatch(single, *arrays):
    return tuple(a[0] if single else a for a in arrays)


# --------------------------------------------------------------------------- RGB

def huber_rgb(rendered, observed, delta=HUBER_DELTA):
    single, (x, y) = _batched(rendered, observed, ndim=3)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    r = x - y
    a = np.abs(r)
    quad = a <= delta
    per = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    n_el = np.prod(x.shape[1:])
    P = x.shape[0]
    loss = per.reshape(P, -1).mean(1).mean()
    grad = np.where(quad, r, delta * np.sign(r)) / (n_el * P)
    return float(loss), _unbatch(single, grad)[0]


# --------------------------------------------------------------------------- depth

@dataclass
class AffineDepthAlignment:
    scale: np.ndarray
    shift: np.ndarray
    valid: np.ndarray

    def apply(self, mono):
        s = np.reshape(self.scale, np.shape(self.scale) + (1,) * (np.ndim(mono) - np.ndim(self.scale)))
        t = np.reshape(self.shift, np.shape(self.shift) + (1,) * (np.ndim(mono) - np.ndim(self.shift)))
        return s * mono + t


def solve_patch_alignment(mono, rendered, valid=None):
    """Least-squares ``(s, t)`` minimizing ``sum (s * mono + t - rendered)^2`` per patch.

    Treated as a constant by every backward pass.
    """
    single, (d, r) = _batched(mono, rendered, ndim=2)
    m = np.ones(d.shape, bool) if valid is None else np.asarray(valid, bool).reshape(d.shape)
    P = d.shape[0]
    d2 = d.reshape(P, -1)
    r2 = r.reshape(P, -1)
    m2 = m.reshape(P, -1).astype(np.float64)
    n = m2.sum(1)
    nz = np.maximum(n, 1)
    md = (m2 * d2).sum(1) / nz
    mr = (m2 * r2).sum(1) / nz
    dd = d2 - md[:, None]
    var = (m2 * dd * dd).sum(1) / nz
    cov = (m2 * dd * (r2 - mr[:, None])).sum(1) / nz
    flat = var < 1e-12 * md * md
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(flat, 1.0, cov / np.where(flat, 1.0, var))
    t = mr - s * md
    ok = (n >= 2) & (s > 0) & np.isfinite(s) & np.isfinite(t)
    s, t, ok = _unbatch(single, s, t, ok)
    return AffineDepthAlignment(np.asarray(s), np.asarray(t), np.asarray(ok))


def _pairs(mask):
    """Forward-difference pair masks (horizontal, vertical) over the last two axes."""
    h = mask[..., :, 1:] & mask[..., :, :-1]
    v = mask[..., 1:, :] & mask[..., :-1, :]
    return h, v


def _grad_x(a):
    return a[..., :, 1:] - a[..., :, :-1]


def _grad_y(a):
    return a[..., 1:, :] - a[..., :-1, :]


def _scatter_grad_x(g, shape):
    out = np.zeros(shape)
    out[..., :, 1:] += g
    out[..., :, :-1] -= g
    return out


def _scatter_grad_y(g, shape):
    out = np.zeros(shape)
    out[..., 1:, :] += g
    out[..., :-1, :] -= g
    return out


def depth_losses(aligned, rendered, valid=None, patch_valid=None, gradients=True):
    """``(L_depth, L_grad_depth, d_rendered_depth, d_rendered_grad)``.

    ``aligned`` is the transformed monocular depth. ``valid`` masks pixels,
    ``patch_valid`` drops whole patches (e.g. failed alignment).
    """
    single, (a, r) = _batched(aligned, rendered, ndim=2)
    P = a.shape[0]
    m = np.ones(a.shape, bool) if valid is None else np.asarray(valid, bool).reshape(a.shape)
    if patch_valid is not None:
        m = m & np.asarray(patch_valid, bool).reshape(P, 1, 1)
    res = r - a
    n = m.reshape(P, -1).sum(1)
    nz = np.maximum(n, 1)[:, None, None]
    L_depth = (np.where(m, np.abs(res), 0).reshape(P, -1).sum(1) / nz[:, 0, 0]).mean()
    g_depth = np.where(m, np.sign(res), 0) / nz / P

    L_grad = 0.0
    g_grad = np.zeros(a.shape)
    if gradients:
        hm, vm = _pairs(m)
        gx = _grad_x(res)
        gy = _grad_y(res)
        npairs = hm.reshape(P, -1).sum(1) + vm.reshape(P, -1).sum(1)
        npz = np.maximum(npairs, 1)
        L_grad = ((np.where(hm, np.abs(gx), 0).reshape(P, -1).sum(1)
                   + np.where(vm, np.abs(gy), 0).reshape(P, -1).sum(1)) / npz).mean()
        sx = np.where(hm, np.sign(gx), 0) / npz[:, None, None] / P
        sy = np.where(vm, np.sign(gy), 0) / npz[:, None, None] / P
        g_grad = _scatter_grad_x(sx, a.shape) + _scatter_grad_y(sy, a.shape)
    g_depth, g_grad = _unbatch(single, g_depth, g_grad)
    return float(L_depth), float(L_grad), g_depth, g_grad


# --------------------------------------------------------------------------- normals

def normal_losses(mono, rendered_grad, rendered_mlp, valid=None, gradients=True):
    """``(L_normal, L_grad_normal, d_grad_normals, d_mlp_normals, d_grad_normals_from_grad_term)``.

    Angular term uses the dot product of unit vectors; L1 sums components.
    The gradient term acts on the density-gradient normals only.
    """
    single, (n, ng, nm) = _batched(mono, rendered_grad, rendered_mlp, ndim=3)
    P = n.shape[0]
    m = np.ones(n.shape[:-1], bool) if valid is None else np.asarray(valid, bool).reshape(n.shape[:-1])
    cnt = np.maximum(m.reshape(P, -1).sum(1), 1)[:, None, None]

    def term(nr):
        diff = n - nr
        per = 1.0 - (n * nr).sum(-1) + np.abs(diff).sum(-1)
        grad = -n - np.sign(diff)
        return per, grad

    per_g, dg = term(ng)
    per_m, dm = term(nm)
    per = np.where(m, per_g + per_m, 0)
    L_normal = (per.reshape(P, -1).sum(1) / cnt[:, 0, 0]).mean()
    w = (m / cnt / P)[..., None]
    d_ng = dg * w
    d_nm = dm * w

    L_grad = 0.0
    d_ng_grad = np.zeros(n.shape)
    if gradients:
        hm, vm = _pairs(m)
        ex = _grad_x(n.transpose(0, 3, 1, 2) - ng.transpose(0, 3, 1, 2))
        ey = _grad_y(n.transpose(0, 3, 1, 2) - ng.transpose(0, 3, 1, 2))
        npairs = np.maximum(hm.reshape(P, -1).sum(1) + vm.reshape(P, -1).sum(1), 1)
        hx = hm[:, None]
        vy = vm[:, None]
        L_grad = ((np.where(hx, np.abs(ex), 0).reshape(P, -1).sum(1)
                   + np.where(vy, np.abs(ey), 0).reshape(P, -1).sum(1)) / npairs).mean()
        # residual is (n - ng), so d/d ng flips the sign
        sx = -np.where(hx, np.sign(ex), 0) / npairs[:, None, None, None] / P
        sy = -np.where(vy, np.sign(ey), 0) / npairs[:, None, None, None] / P
        shape = (P, 3) + n.shape[1:3]
        d_ng_grad = (_scatter_grad_x(sx, shape) + _scatter_grad_y(sy, shape)).transpose(0, 2, 3, 1)
    d_ng, d_nm, d_ng_grad = _unbatch(single, d_ng, d_nm, d_ng_grad)
    return float(L_normal), float(L_grad), d_ng, d_nm, d_ng_grad


# --------------------------------------------------------------------------- photometric

def _luma(c):
    return c.mean(-1)


def masked_ssim(rendered, target, mask=None, c1=SSIM_C1, c2=SSIM_C2):
    """``1 - SSIM`` over the masked pixels of each patch as a single window."""
    single, (x3, y3) = _batched(rendered, target, ndim=3)
    P = x3.shape[0]
    m = np.ones(x3.shape[:-1], bool) if mask is None else np.asarray(mask, bool).reshape(x3.shape[:-1])
    x = _luma(x3).reshape(P, -1)
    y = _luma(y3).reshape(P, -1)
    mf = m.reshape(P, -1).astype(np.float64)
    n = mf.sum(1)
    use = n >= MIN_MASKED
    nz = np.maximum(n, 1)
    mx = (mf * x).sum(1) / nz
    my = (mf * y).sum(1) / nz
    dx = x - mx[:, None]
    dy = y - my[:, None]
    vx = (mf * dx * dx).sum(1) / nz
    vy = (mf * dy * dy).sum(1) / nz
    cxy = (mf * dx * dy).sum(1) / nz
    A = 2 * mx * my + c1
    B = 2 * cxy + c2
    Cc = mx * mx + my * my + c1
    D = vx + vy + c2
    ssim = (A * B) / (Cc * D)
    loss = np.where(use, 1 - ssim, 0.0)
    # d ssim / d stats
    dA = B / (Cc * D)
    dB = A / (Cc * D)
    dC = -ssim / Cc
    dD = -ssim / D
    d_mx = dA * 2 * my + dC * 2 * mx
    d_vx = dD
    d_cxy = dB * 2
    gx = (d_mx[:, None] + d_vx[:, None] * 2 * dx + d_cxy[:, None] * dy) * mf / nz[:, None]
    gx = -np.where(use[:, None], gx, 0.0) / P
    g = np.repeat((gx / 3.0).reshape(x3.shape[:-1])[..., None], 3, axis=-1)
    L = float(loss.mean())
    return L, _unbatch(single, g)[0]


def masked_ncc(rendered, target, mask=None, eps=NCC_EPS):
    """``1 - NCC`` over masked luminances. Zero-variance targets are skipped (loss 0)."""
    single, (x3, y3) = _batched(rendered, target, ndim=3)
    P = x3.shape[0]
    m = np.ones(x3.shape[:-1], bool) if mask is None else np.asarray(mask, bool).reshape(x3.shape[:-1])
    x = _luma(x3).reshape(P, -1)
    y = _luma(y3).reshape(P, -1)
    mf = m.reshape(P, -1).astype(np.float64)
    n = mf.sum(1)
    nz = np.maximum(n, 1)
    dx = (x - ((mf * x).sum(1) / nz)[:, None]) * mf
    dy = (y - ((mf * y).sum(1) / nz)[:, None]) * mf
    sxy = (dx * dy).sum(1)
    sxx = (dx * dx).sum(1)
    syy = (dy * dy).sum(1)
    use = (n >= MIN_MASKED) & (syy >= eps)
    den = np.sqrt((sxx + eps) * (syy + eps))
    ncc = sxy / den
    loss = np.where(use, 1 - ncc, 0.0)
    # d ncc / d x_i = dy_i / den - ncc * dx_i / (sxx + eps); mean terms cancel for centered sums
    gx = dy / den[:, None] - (ncc / (sxx + eps))[:, None] * dx
    gx = -np.where(use[:, None], gx, 0.0) / P
    g = np.repeat((gx / 3.0).reshape(x3.shape[:-1])[..., None], 3, axis=-1)
    return float(loss.mean()), _unbatch(single, g)[0]


# --------------------------------------------------------------------------- MVS / total

def mvs_depth_loss(mvs_depth, rendered, valid=None):
    """Mean L1 to metric MVS depth over pixels with ``mvs_depth > 0``; no alignment."""
    mvs = np.asarray(mvs_depth, dtype=np.float64)
    r = np.asarray(rendered, dtype=np.float64)
    m = mvs > 0
    if valid is not None:
        m &= np.asarray(valid, bool)
    n = int(m.sum())
    if n == 0:
        return 0.0, np.zeros_like(r)
    res = r - mvs
    return float(np.abs(res[m]).sum() / n), np.where(m, np.sign(res), 0.0) / n


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum; returns ``(total, scales)`` where ``scales[name]`` multiplies that term's adjoints."""
    w = weights.as_dict()
    scales = {}
    total = 0.0
    for name, value in terms.items():
        lam = w[name]
        v = float(value) if value is not None and np.isfinite(value) else 0.0
        scales[name] = lam
        total += lam * v
    return total, scales
