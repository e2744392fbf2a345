"""Radiance field: multi-resolution dense feature grids feeding three small MLPs.

Forward passes return a tape; ``backward`` consumes it and accumulates
parameter gradients into the :class:`ParameterStore`. Everything is plain
numpy except the trilinear gather/scatter kernels, which are numba loops.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field as dc_field

import numba
import numpy as np

CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 4
    base_resolution: int = 16
    max_resolution: int = 128
    channels: int = 8
    hidden: int = 16
    geo_features: int = 15
    grid_init: float = 1e-4
    density_bias: float = -3.0  # starts near-empty instead of ln2 fog

    def __post_init__(self):
        if min(self.levels, self.base_resolution, self.channels, self.hidden, self.geo_features) < 1:
            raise ValueError("all field widths must be >= 1")

    @property
    def resolutions(self):
        return [min(self.base_resolution * 2 ** l, self.max_resolution) for l in range(self.levels)]

    @property
    def encoding_width(self):
        return self.levels * self.channels


class ParameterStore:
    """Flat parameter and gradient arrays with named, contiguous spans."""

    def __init__(self, shapes: dict, dtype=np.float64):
        self.spans = {}
        off = 0
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            self.spans[name] = (off, tuple(shape))
            off += size
        self.data = np.zeros(off, dtype=dtype)
        self.grad = np.zeros(off, dtype=dtype)

    def __len__(self):
        return self.data.size

    def __getitem__(self, name):
        off, shape = self.spans[name]
        return self.data[off:off + int(np.prod(shape))].reshape(shape)

    def grad_of(self, name):
        off, shape = self.spans[name]
        return self.grad[off:off + int(np.prod(shape))].reshape(shape)

    def span(self, name):
        off, shape = self.spans[name]
        return slice(off, off + int(np.prod(shape)))

    def zero_grad(self):
        self.grad[:] = 0.0


# --------------------------------------------------------------------------- grid kernels

@numba.njit(cache=True)
def _encode_forward(xn, grid, offsets, res, C):
    N = xn.shape[0]
    L = res.shape[0]
    feat = np.zeros((N, L * C), dtype=grid.dtype)
    idx = np.empty((N, L, 8), dtype=np.int64)
    wts = np.empty((N, L, 8), dtype=grid.dtype)
    for n in range(N):
        for l in range(L):
            r = res[l]
            r1 = r + 1
            base = offsets[l]
            cell = np.empty(3, dtype=np.int64)
            frac = np.empty(3, dtype=grid.dtype)
            for a in range(3):
                p = xn[n, a] * r
                i = int(np.floor(p))
                if i < 0:
                    i = 0
                if i > r - 1:
                    i = r - 1
                cell[a] = i
                frac[a] = p - i
            c = 0
            for dx in range(2):
                wx = frac[0] if dx else 1.0 - frac[0]
                for dy in range(2):
                    wy = frac[1] if dy else 1.0 - frac[1]
                    for dz in range(2):
                        wz = frac[2] if dz else 1.0 - frac[2]
                        v = ((cell[0] + dx) * r1 + (cell[1] + dy)) * r1 + (cell[2] + dz)
                        o = base + v * C
                        w = wx * wy * wz
                        idx[n, l, c] = o
                        wts[n, l, c] = w
                        for k in range(C):
                            feat[n, l * C + k] += w * grid[o + k]
                        c += 1
    return feat, idx, wts


@numba.njit(cache=True)
def _encode_backward(idx, wts, dfeat, grad, C):
    N, L, _ = idx.shape
    for n in range(N):
        for l in range(L):
            for c in range(8):
                o = idx[n, l, c]
                w = wts[n, l, c]
                for k in range(C):
                    grad[o + k] += w * dfeat[n, l * C + k]


# --------------------------------------------------------------------------- activations

def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class FieldTape:
    xn: np.ndarray
    idx: np.ndarray
    wts: np.ndarray
    feat: np.ndarray
    h0: np.ndarray
    raw_sigma: np.ndarray
    geo: np.ndarray
    color_in: np.ndarray | None = None
    hc: np.ndarray | None = None
    color: np.ndarray | None = None
    hn: np.ndarray | None = None
    raw_n: np.ndarray | None = None
    consumed: bool = False


@dataclass
class GradientRecord:
    """Parameter gradient of one backward call, applied later in a fixed order."""

    mlp: dict = dc_field(default_factory=dict)
    grid: list = dc_field(default_factory=list)  # (idx, wts, dfeat)

    def apply(self, store: ParameterStore):
        for name, g in self.mlp.items():
            store.grad_of(name)[...] += g
        for idx, wts, dfeat in self.grid:
            _encode_backward(idx, wts, np.ascontiguousarray(dfeat, dtype=store.grad.dtype),
                             store.grad, store_channels(store))

    def extend(self, other: "GradientRecord"):
        for name, g in other.mlp.items():
            if name in self.mlp:
                self.mlp[name] = self.mlp[name] + g
            else:
                self.mlp[name] = g
        self.grid.extend(other.grid)


def store_channels(store):
    return store.spans["grid0"][1][1]


class FieldDomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class RadianceField:
    """``F(x, v) -> (sigma, color, n_theta)`` over an axis-aligned scene box."""

    def __init__(self, config: FieldConfig = FieldConfig(), aabb=((0, 0, 0), (1, 1, 1)),
                 seed=0, dtype=np.float64):
        self.config = config
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.extent = self.aabb[1] - self.aabb[0]
        cfg = config
        shapes = {}
        for l, r in enumerate(cfg.resolutions):
            shapes[f"grid{l}"] = ((r + 1) ** 3, cfg.channels)
        H, G = cfg.hidden, cfg.geo_features
        shapes.update({
            "D0.w": (cfg.encoding_width, H), "D0.b": (H,),
            "D1.w": (H, G), "D1.b": (G,),
            "D2.w": (H, 1), "D2.b": (1,),
            "C0.w": (G + 3, H), "C0.b": (H,),
            "C1.w": (H, 3), "C1.b": (3,),
            "S0.w": (G, H), "S0.b": (H,),
            "S1.w": (H, 3), "S1.b": (3,),
        })
        self.params = ParameterStore(shapes, dtype=dtype)
        self._offsets = np.array([self.params.spans[f"grid{l}"][0] for l in range(cfg.levels)], np.int64)
        self._res = np.array(cfg.resolutions, np.int64)
        self.reset_parameters(seed)

    # ------------------------------------------------------------------ setup

    def reset_parameters(self, seed=0):
        rng = np.random.default_rng(seed)
        p = self.params
        for l in range(self.config.levels):
            g = p[f"grid{l}"]
            g[...] = rng.uniform(-self.config.grid_init, self.config.grid_init, size=g.shape)
        for name in ("D0", "D1", "D2", "C0", "C1", "S0", "S1"):
            w = p[f"{name}.w"]
            bound = np.sqrt(6.0 / w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            p[f"{name}.b"][...] = 0.0
        p["D2.b"][...] = self.config.density_bias

    @property
    def finest_cell(self):
        return self.extent / max(self.config.resolutions)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.aabb[0]) / self.extent

    def contains(self, x, tol=1e-9):
        x = np.asarray(x)
        return np.all((x >= self.aabb[0] - tol) & (x <= self.aabb[1] + tol), axis=-1)

    # ------------------------------------------------------------------ forward

    def forward(self, x, v=None, heads=("color", "normal")):
        """Batched query. ``x``: (N, 3) world points, ``v``: (N, 3) unit directions.

        Returns ``(out, tape)`` where ``out`` has ``sigma`` (N,), and, when the
        heads are requested, ``color`` (N, 3) and ``normal`` (N, 3, unit) plus
        ``normal_raw_norm``.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        p = self.params
        dt = p.data.dtype
        xn = np.clip(self.normalize(x), 0.0, 1.0).astype(dt)
        feat, idx, wts = _encode_forward(xn, p.data, self._offsets, self._res, self.config.channels)
        a0 = feat @ p["D0.w"] + p["D0.b"]
        h0 = _relu(a0)
        geo = h0 @ p["D1.w"] + p["D1.b"]
        raw_sigma = (h0 @ p["D2.w"] + p["D2.b"])[:, 0]
        tape = FieldTape(xn, idx, wts, feat, h0, raw_sigma, geo)
        out = {"sigma": softplus(raw_sigma)}
        if "color" in heads:
            v = np.asarray(v, dtype=dt).reshape(-1, 3)
            tape.color_in = np.concatenate([geo, v], axis=1)
            tape.hc = _relu(tape.color_in @ p["C0.w"] + p["C0.b"])
            tape.color = sigmoid(tape.hc @ p["C1.w"] + p["C1.b"])
            out["color"] = tape.color
        if "normal" in heads:
            tape.hn = _relu(geo @ p["S0.w"] + p["S0.b"])
            tape.raw_n = tape.hn @ p["S1.w"] + p["S1.b"]
            nrm = np.linalg.norm(tape.raw_n, axis=1, keepdims=True)
            out["normal"] = tape.raw_n / np.maximum(nrm, 1e-12)
            out["normal_raw_norm"] = nrm[:, 0]
        return out, tape

    def query(self, x, v):
        """Single-point query returning a :class:`FieldSample`."""
        x = np.asarray(x, dtype=np.float64).reshape(3)
        if not self.contains(x):
            raise FieldDomainError(f"query point {x} outside the scene box")
        out, _ = self.forward(x[None], np.asarray(v, dtype=np.float64).reshape(1, 3))
        n_grad, degenerate = self.density_gradient_normal(x, strict=False)
        return FieldSample(x, np.asarray(v, dtype=np.float64), float(out["sigma"][0]),
                           out["color"][0], out["normal"][0], n_grad, degenerate)

    # ------------------------------------------------------------------ normals

    def stencil(self, x, eps=None):
        """Central-difference stencil points (N, 6, 3) and per-axis step lengths (N, 3).

        Points are clamped into the box; step lengths reflect the clamping.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        eps = 0.5 * self.finest_cell if eps is None else np.broadcast_to(np.asarray(eps, float), (3,))
        pts = np.repeat(x[:, None, :], 6, axis=1)
        for a in range(3):
            pts[:, 2 * a, a] += eps[a]
            pts[:, 2 * a + 1, a] -= eps[a]
        pts = np.clip(pts, self.aabb[0], self.aabb[1])
        h = np.stack([pts[:, 2 * a, a] - pts[:, 2 * a + 1, a] for a in range(3)], axis=1)
        return pts, h

    def gradient_normals(self, x, eps=None):
        """Density-gradient normals ``-grad sigma / |grad sigma|`` for a batch of points.

        Returns ``(normals, degenerate, ntape)``; degenerate rows are zero.
        """
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        pts, h = self.stencil(x, eps)
        out, tape = self.forward(pts.reshape(-1, 3), heads=())
        s = out["sigma"].reshape(-1, 6)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = (s[:, 0::2] - s[:, 1::2]) / h
        g = np.where(h > 0, g, 0.0)
        gn = np.linalg.norm(g, axis=1)
        degenerate = gn < 1e-8
        n = np.where(degenerate[:, None], 0.0, -g / np.where(degenerate, 1.0, gn)[:, None])
        return n, degenerate, (tape, h, gn, n, degenerate)

    def density_gradient_normal(self, x, eps=None, strict=True):
        x = np.asarray(x, dtype=np.float64).reshape(3)
        eps_v = 0.5 * self.finest_cell if eps is None else np.broadcast_to(np.asarray(eps, float), (3,))
        if strict and not (self.contains(x + eps_v) and self.contains(x - eps_v)):
            raise FieldDomainError("finite-difference stencil leaves the scene box")
        n, deg, _ = self.gradient_normals(x[None], eps)
        return n[0], bool(deg[0])

    # ------------------------------------------------------------------ backward

    def backward(self, tape: FieldTape, d_sigma=None, d_color=None, d_normal=None, defer=False):
        """Reverse pass for one forward tape.

        Accumulates into ``params.grad`` unless ``defer`` is set, in which case
        the :class:`GradientRecord` is returned for ordered application.
        """
        if tape is None:
            raise TapeError("backward called without a forward tape")
        if tape.consumed:
            raise TapeError("forward tape already consumed")
        tape.consumed = True
        p = self.params
        dt = p.data.dtype
        N = tape.feat.shape[0]
        rec = GradientRecord()
        d_geo = np.zeros((N, self.config.geo_features), dtype=dt)
        d_h0 = np.zeros((N, self.config.hidden), dtype=dt)

        if d_color is not None:
            dz = np.asarray(d_color, dt) * tape.color * (1 - tape.color)
            rec.mlp["C1.w"] = tape.hc.T @ dz
            rec.mlp["C1.b"] = dz.sum(0)
            dhc = (dz @ p["C1.w"].T) * (tape.hc > 0)
            rec.mlp["C0.w"] = tape.color_in.T @ dhc
            rec.mlp["C0.b"] = dhc.sum(0)
            d_geo += (dhc @ p["C0.w"].T)[:, :self.config.geo_features]
        if d_normal is not None:
            raw = tape.raw_n
            nrm = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
            nh = raw / nrm
            dn = np.asarray(d_normal, dt)
            draw = (dn - nh * (nh * dn).sum(1, keepdims=True)) / nrm
            rec.mlp["S1.w"] = tape.hn.T @ draw
            rec.mlp["S1.b"] = draw.sum(0)
            dhn = (draw @ p["S1.w"].T) * (tape.hn > 0)
            rec.mlp["S0.w"] = tape.geo.T @ dhn
            rec.mlp["S0.b"] = dhn.sum(0)
            d_geo += dhn @ p["S0.w"].T
        if d_color is not None or d_normal is not None:
            rec.mlp["D1.w"] = tape.h0.T @ d_geo
            rec.mlp["D1.b"] = d_geo.sum(0)
            d_h0 += d_geo @ p["D1.w"].T
        if d_sigma is not None:
            draw_s = (np.asarray(d_sigma, dt) * sigmoid(tape.raw_sigma))[:, None]
            rec.mlp["D2.w"] = tape.h0.T @ draw_s
            rec.mlp["D2.b"] = draw_s.sum(0)
            d_h0 += draw_s @ p["D2.w"].T
        da0 = d_h0 * (tape.h0 > 0)
        rec.mlp["D0.w"] = tape.feat.T @ da0
        rec.mlp["D0.b"] = da0.sum(0)
        dfeat = da0 @ p["D0.w"].T
        rec.grid.append((tape.idx, tape.wts, dfeat))
        if defer:
            return rec
        rec.apply(p)
        return None

    def gradient_normals_backward(self, ntape, d_normal, defer=False):
        """Chain adjoints of density-gradient normals through the stencil queries."""
        tape, h, gn, n, degenerate = ntape
        dn = np.asarray(d_normal, dtype=np.float64)
        safe = np.where(degenerate, 1.0, gn)[:, None]
        dg = -(dn - n * (n * dn).sum(1, keepdims=True)) / safe
        dg = np.where(degenerate[:, None] | (h <= 0), 0.0, dg)
        with np.errstate(divide="ignore", invalid="ignore"):
            dg = np.where(h > 0, dg / np.where(h > 0, h, 1.0), 0.0)
        ds = np.zeros((len(n), 6))
        ds[:, 0::2] = dg
        ds[:, 1::2] = -dg
        return self.backward(tape, d_sigma=ds.reshape(-1), defer=defer)

    # ------------------------------------------------------------------ persistence

    def save(self, path, step=0, extra=None):
        header = {"config": asdict(self.config), "aabb": self.aabb.tolist(), "step": int(step),
                  "n_params": len(self.params)}
        if extra:
            header.update(extra)
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<BI", CHECKPOINT_VERSION, len(hb)))
            f.write(hb)
            f.write(self.params.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=np.float64):
        with open(path, "rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            version, n = struct.unpack("<BI", f.read(5))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            header = json.loads(f.read(n).decode("utf-8"))
            data = np.frombuffer(f.read(), dtype="<f4")
        fld = cls(FieldConfig(**header["config"]), header["aabb"], dtype=dtype)
        if data.size != len(fld.params):
            raise ValueError(f"{path}: parameter count {data.size} != {len(fld.params)}")
        fld.params.data[:] = data
        return fld, header


@dataclass
class FieldSample:
    x: np.ndarray
    v: np.ndarray
    sigma: float
    color: np.ndarray
    normal_mlp: np.ndarray
    normal_grad: np.ndarray
    degenerate: bool
