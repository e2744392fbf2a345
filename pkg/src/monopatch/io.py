"""On-disk formats: PFM maps, PLY clouds, PNG images and the scene directory layout.

Scene directory::

    cameras.json            [{fx, fy, cx, cy, width, height, R: [9], t: [3]}, ...]
    images/0000.png         8-bit RGB
    mono_depth/0000.pfm     float32 grayscale
    mono_normal/0000.pfm    float32 3-channel, world frame
    gt_depth/0000.pfm       optional
    sfm_points.ply          ASCII, vertex x y z + list of observing views
    gt_points.ply           optional
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, PoseValidityError, check_rotation
from .scene import SceneBundle


class BundleFormatError(ValueError):
    """Base class for malformed scene directories."""


class MissingFileError(BundleFormatError, FileNotFoundError):
    def __init__(self, path, view=None):
        self.path = str(path)
        self.view = view
        where = f" (view {view})" if view is not None else ""
        super().__init__(f"missing file {self.path}{where}")


class DimensionMismatchError(BundleFormatError):
    pass


# --------------------------------------------------------------------------- PFM

def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs HxW or HxWx3 data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise BundleFormatError(f"{path}: not a PFM file")
        channels = 3 if header == b"PF" else 1
        dims = f.readline()
        while dims.startswith(b"#"):
            dims = f.readline()
        w, h = map(int, dims.split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


# --------------------------------------------------------------------------- PLY

def write_ply(path, points, colors=None, views=None, binary=False):
    """Write a point cloud. ``colors`` are floats in [0, 1]; ``views`` is a list of index lists."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    props = ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.clip(np.round(np.asarray(colors).reshape(-1, 3) * 255), 0, 255).astype(np.uint8)
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    if views is not None:
        if binary:
            raise ValueError("view lists are only written in ASCII PLY")
        props.append("property list uchar int view_indices")
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(["ply", f"format {fmt} 1.0", f"element vertex {n}", *props, "end_header"]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            dt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if colors is not None:
                dt += [("r", "u1"), ("g", "u1"), ("b", "u1")]
            rec = np.empty(n, dtype=dt)
            rec["x"], rec["y"], rec["z"] = points.T
            if colors is not None:
                rec["r"], rec["g"], rec["b"] = colors.T
            f.write(rec.tobytes())
        else:
            lines = []
            for i in range(n):
                row = [repr(float(np.float32(c))) for c in points[i]]
                if colors is not None:
                    row += [str(int(c)) for c in colors[i]]
                if views is not None:
                    row += [str(len(views[i]))] + [str(int(j)) for j in views[i]]
                lines.append(" ".join(row))
            f.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def read_ply(path):
    """Returns ``(points, colors or None, views or None)``."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise BundleFormatError(f"{path}: not a PLY file")
        fmt, n, props = None, 0, []
        while True:
            line = f.readline()
            if not line:
                raise BundleFormatError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        body = f.read()
    has_color = "red" in props
    has_views = "view_indices" in props
    if fmt == "binary_little_endian":
        dt = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if has_color:
            dt += [("r", "u1"), ("g", "u1"), ("b", "u1")]
        rec = np.frombuffer(body, dtype=dt, count=n)
        pts = np.stack([rec["x"], rec["y"], rec["z"]], 1).astype(np.float64)
        cols = np.stack([rec["r"], rec["g"], rec["b"]], 1) / 255.0 if has_color else None
        return pts, cols, None
    rows = body.decode("ascii").splitlines()[:n]
    pts = np.zeros((n, 3))
    cols = np.zeros((n, 3)) if has_color else None
    views = [] if has_views else None
    for i, row in enumerate(rows):
        vals = row.split()
        pts[i] = [float(x) for x in vals[:3]]
        k = 3
        if has_color:
            cols[i] = [int(x) / 255.0 for x in vals[3:6]]
            k = 6
        if has_views:
            m = int(vals[k])
            views.append([int(x) for x in vals[k + 1:k + 1 + m]])
    return pts, cols, views


# --------------------------------------------------------------------------- images

def write_png(path, rgb):
    arr = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


# --------------------------------------------------------------------------- bundles

def _name(i, ext):
    return f"{i:04d}.{ext}"


def save_bundle(bundle: SceneBundle, path, gt=None):
    root = Path(path)
    for sub in ("images", "mono_depth", "mono_normal"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    meta = {"aabb": bundle.scene_aabb.tolist(), "cameras": [c.to_dict() for c in bundle.cameras]}
    _atomic_write_text(root / "cameras.json", json.dumps(meta["cameras"], indent=1))
    _atomic_write_text(root / "scene.json", json.dumps({"aabb": meta["aabb"]}))
    for i in range(bundle.n_views):
        write_png(root / "images" / _name(i, "png"), bundle.images[i])
        write_pfm(root / "mono_depth" / _name(i, "pfm"), bundle.mono_depth[i])
        write_pfm(root / "mono_normal" / _name(i, "pfm"), bundle.mono_normal[i])
    write_ply(root / "sfm_points.ply", bundle.sfm_points, views=bundle.sfm_views)
    if gt is not None:
        (root / "gt_depth").mkdir(exist_ok=True)
        for i, d in enumerate(gt.depth):
            write_pfm(root / "gt_depth" / _name(i, "pfm"), d)
        write_ply(root / "gt_points.ply", gt.points)


def _atomic_write_text(path, text):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_bundle(path, min_views=2) -> SceneBundle:
    root = Path(path)
    cam_file = root / "cameras.json"
    if not cam_file.exists():
        raise MissingFileError(cam_file)
    cams = []
    for i, d in enumerate(json.loads(cam_file.read_text())):
        try:
            check_rotation(np.asarray(d["R"], dtype=np.float64).reshape(3, 3))
        except PoseValidityError as e:
            raise PoseValidityError(f"camera {i}: {e}") from None
        cams.append(Camera.from_dict(d))
    scene_file = root / "scene.json"
    if scene_file.exists():
        aabb = np.asarray(json.loads(scene_file.read_text())["aabb"])
    else:
        aabb = None
    images, depths, normals = [], [], []
    for i, cam in enumerate(cams):
        files = (root / "images" / _name(i, "png"), root / "mono_depth" / _name(i, "pfm"),
                 root / "mono_normal" / _name(i, "pfm"))
        for f in files:
            if not f.exists():
                raise MissingFileError(f, view=i)
        img, md, mn = read_png(files[0]), read_pfm(files[1]), read_pfm(files[2])
        hw = (cam.height, cam.width)
        if img.shape[:2] != hw or md.shape != hw or mn.shape[:2] != hw:
            raise DimensionMismatchError(
                f"view {i}: image {img.shape[:2]}, mono depth {md.shape}, mono normal "
                f"{mn.shape[:2]} disagree with camera {hw}")
        images.append(img)
        depths.append(md)
        normals.append(mn / np.maximum(np.linalg.norm(mn, axis=-1, keepdims=True), 1e-12))
    sfm_file = root / "sfm_points.ply"
    if sfm_file.exists():
        pts, _, views = read_ply(sfm_file)
        views = views if views is not None else [[] for _ in range(len(pts))]
    else:
        pts, views = np.zeros((0, 3)), []
    if aabb is None:
        if not len(pts):
            raise MissingFileError(scene_file)
        aabb = np.stack([pts.min(0), pts.max(0)])
    bundle = SceneBundle(images=images, cameras=cams, mono_depth=depths, mono_normal=normals,
                         sfm_points=pts, sfm_views=views, scene_aabb=aabb)
    return bundle.validate(min_views=min_views)


def load_gt_depths(path, n_views):
    root = Path(path) / "gt_depth"
    out = []
    for i in range(n_views):
        f = root / _name(i, "pfm")
        if not f.exists():
            raise MissingFileError(f, view=i)
        out.append(read_pfm(f))
    return out


def load_depth_dir(path):
    """All ``####.pfm`` maps in a directory, ordered by index."""
    root = Path(path)
    files = sorted(p for p in root.iterdir() if re.fullmatch(r"\d{4}\.pfm", p.name))
    if not files:
        raise MissingFileError(root / "0000.pfm")
    return [read_pfm(f) for f in files]
