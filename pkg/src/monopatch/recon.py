"""Depth-map rendering, multi-view consistency fusion and geometry scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .camera import project, unproject
from .io import write_ply
from .render import StepSpec, render_image

MIN_OPACITY = 0.5
INLIER_RATIO = 1.03


class EmptyCloudError(ValueError):
    pass


@dataclass
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray
    normal: np.ndarray | None = None
    color: np.ndarray | None = None


def render_depth_maps(field_, bundle, restriction=None, views=None, step_divisions=512, normals=True):
    """Expected depth per view; pixels with accumulated opacity below 0.5 are invalid."""
    spec = StepSpec(divisions=step_divisions, jitter=False)
    views = range(bundle.n_views) if views is None else views
    out = {}
    for i in views:
        r = render_image(field_, bundle.cameras[i], bundle.scene_aabb, spec, restriction, normals=normals)
        valid = r["opacity"] >= MIN_OPACITY
        out[i] = DepthMap(np.where(valid, r["depth"], 0.0), valid, r["normal_grad"], r["color"])
    return out


@dataclass
class FusionParams:
    rel_depth: float = 0.01
    min_support: int = 2
    normal_deg: float = 30.0


@dataclass
class FusedCloud:
    points: np.ndarray
    colors: np.ndarray
    support: np.ndarray
    views: list = field(default_factory=list)

    def __len__(self):
        return len(self.points)


def _as_depthmap(m):
    if isinstance(m, DepthMap):
        return m
    d = np.asarray(m, dtype=np.float64)
    return DepthMap(d, np.isfinite(d) & (d > 0))


def _agrees(X, cam, depth, rel):
    u, v, z, front = project(cam, X)
    ui, vi = np.round(u), np.round(v)
    inside = front & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    D = depth[np.where(inside, vi, 0).astype(np.int64), np.where(inside, ui, 0).astype(np.int64)]
    return inside & (np.abs(z - D) <= rel * D)


def fuse_depth_maps(depth_maps, cameras, params: FusionParams = FusionParams(), images=None):
    """Keep pixels that enough other views agree with; emit the mean of the agreeing points.

    ``depth_maps`` maps view index to a :class:`DepthMap` or plain depth array.
    Views are processed in index order. Pixels that supported an emitted point
    are consumed and neither emit nor support again.
    """
    maps = {int(k): _as_depthmap(v) for k, v in dict(depth_maps).items()} if isinstance(depth_maps, dict) \
        else {i: _as_depthmap(v) for i, v in enumerate(depth_maps)}
    order = sorted(maps)
    if len(order) < 2:
        raise ValueError("fusion needs at least two depth maps")
    cos_max = np.cos(np.deg2rad(params.normal_deg))
    consumed = {i: ~maps[i].valid.copy() for i in order}
    pts_out, col_out, sup_out, views_out = [], [], [], []
    for r in order:
        cam_r, m_r = cameras[r], maps[r]
        vv, uu = np.nonzero(~consumed[r])
        if not len(vv):
            continue
        X = unproject(cam_r, uu, vv, m_r.depth[vv, uu])
        acc = X.copy()
        count = np.zeros(len(X), np.int64)
        hits = []
        for j in order:
            if j == r:
                continue
            cam_j, m_j = cameras[j], maps[j]
            u, v, z, front = project(cam_j, X)
            ui, vi = np.round(u), np.round(v)
            inside = front & (ui >= 0) & (ui < cam_j.width) & (vi >= 0) & (vi < cam_j.height)
            ui = np.where(inside, ui, 0).astype(np.int64)
            vi = np.where(inside, vi, 0).astype(np.int64)
            D = m_j.depth[vi, ui]
            ok = inside & ~consumed[j][vi, ui] & (np.abs(z - D) <= params.rel_depth * D)
            if m_r.normal is not None and m_j.normal is not None:
                cosang = (m_r.normal[vv, uu] * m_j.normal[vi, ui]).sum(-1)
                ok &= cosang >= cos_max
            Xj = unproject(cam_j, ui, vi, D)
            acc += np.where(ok[:, None], Xj, 0.0)
            count += ok
            hits.append((j, ok, ui, vi, D))
        keep = count >= params.min_support
        mean = acc / (count + 1)[:, None]
        # the mean must still agree with the depth at the pixel it lands on in every involved view
        good = _agrees(mean, cam_r, m_r.depth, params.rel_depth)
        for j, ok, _, _, _ in hits:
            good &= ~ok | _agrees(mean, cameras[j], maps[j].depth, params.rel_depth)
        P = np.where(good[:, None], mean, X)[keep]
        pts_out.append(P)
        if images is not None:
            col_out.append(np.asarray(images[r])[vv[keep], uu[keep]])
        elif m_r.color is not None:
            col_out.append(m_r.color[vv[keep], uu[keep]])
        else:
            col_out.append(np.full((int(keep.sum()), 3), 0.5))
        sup_out.append(count[keep])
        vlists = [[r] for _ in range(int(keep.sum()))]
        for j, ok, ui, vi, _ in hits:
            sel = ok & keep
            consumed[j][vi[sel], ui[sel]] = True
            for n in np.flatnonzero(sel[keep]):
                vlists[n].append(j)
        views_out += vlists
        consumed[r][vv, uu] = True
    if not pts_out:
        return FusedCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), [])
    return FusedCloud(np.concatenate(pts_out), np.concatenate(col_out), np.concatenate(sup_out), views_out)


def single_view_cloud(depth_map, camera, color=None):
    m = _as_depthmap(depth_map)
    vv, uu = np.nonzero(m.valid)
    pts = unproject(camera, uu, vv, m.depth[vv, uu])
    col = np.full((len(pts), 3), 0.5) if color is None else np.asarray(color)[vv, uu]
    return FusedCloud(pts, col, np.zeros(len(pts), np.int64), [[] for _ in pts])


@dataclass
class GeometryScore:
    thresholds: tuple
    precision: tuple
    recall: tuple
    fscore: tuple
    rel: float | None = None
    inlier_ratio: float | None = None

    def at(self, tau):
        i = self.thresholds.index(tau)
        return self.precision[i], self.recall[i], self.fscore[i]

    def to_dict(self):
        d = {"thresholds": list(self.thresholds)}
        for tau, p, r, f in zip(self.thresholds, self.precision, self.recall, self.fscore):
            d[f"precision@{tau:g}"] = p
            d[f"recall@{tau:g}"] = r
            d[f"fscore@{tau:g}"] = f
        if self.rel is not None:
            d["rel"] = self.rel
            d["inlier_ratio"] = self.inlier_ratio
        return d


def nearest_distances(query, reference, workers=1):
    """Exact Euclidean distance from each query point to its nearest reference point."""
    d, _ = cKDTree(np.asarray(reference, dtype=np.float64)).query(np.asarray(query, dtype=np.float64),
                                                                  workers=workers)
    return d


def fscore(precision, recall):
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def score_geometry(pred, gt, thresholds=(0.02, 0.05), workers=1):
    """Precision / recall / F (percent) of ``pred`` against ``gt`` at each distance threshold."""
    P = np.asarray(getattr(pred, "points", pred), dtype=np.float64).reshape(-1, 3)
    G = np.asarray(getattr(gt, "points", gt), dtype=np.float64).reshape(-1, 3)
    if not len(P) or not len(G):
        raise EmptyCloudError("cannot score an empty point cloud")
    d_pg = nearest_distances(P, G, workers)
    d_gp = nearest_distances(G, P, workers)
    ths = tuple(float(t) for t in np.atleast_1d(thresholds))
    prec = tuple(float(100.0 * np.mean(d_pg <= t)) for t in ths)
    rec = tuple(float(100.0 * np.mean(d_gp <= t)) for t in ths)
    return GeometryScore(ths, prec, rec, tuple(fscore(p, r) for p, r in zip(prec, rec)))


def depth_metrics(pred, gt, valid=None):
    """``(rel, inlier_ratio_percent)`` over pixels valid in both maps."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = np.isfinite(pred) & np.isfinite(gt) & (pred > 0) & (gt > 0)
    if valid is not None:
        m &= np.asarray(valid, bool)
    if not m.any():
        raise ValueError("no pixel has both a predicted and a reference depth")
    p, g = pred[m], gt[m]
    rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    return rel, float(100.0 * np.mean(ratio < INLIER_RATIO))


def export_cloud(cloud, path, binary=False):
    try:
        write_ply(path, cloud.points, cloud.colors, binary=binary)
    except OSError as e:
        raise OSError(f"could not write point cloud to {path}: {e}") from e
