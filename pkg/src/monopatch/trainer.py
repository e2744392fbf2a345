"""Training loop: patch sampling, rendering, losses, virtual views, Adam."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .camera import PatchSampler, pixel_directions, ray_aabb
from .field import FieldConfig, RadianceField
from .losses import (LossWeights, depth_losses, huber_rgb, masked_ncc, masked_ssim, mvs_depth_loss,
                     normal_losses, solve_patch_alignment)
from .render import StepSpec, render_backward, render_image, render_rays
from .restriction import build_restriction
from .virtual import correspond_and_render, sample_virtual_origin

LOSS_TERMS = ("rgb", "depth", "grad_depth", "normal", "grad_normal", "ssim", "ncc", "mvs")
PSNR_CAP = 99.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, components):
        self.step = step
        self.components = components
        detail = ", ".join(f"{k}={v:.4g}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


@dataclass
class TrainConfig:
    steps: int = 2000  # the reference setup trains 50000 steps on full-size scenes
    patches_per_step: int = 128
    patch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-2
    lr_final: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0
    patch: bool = True
    mono: bool = True
    virtual: bool = True
    restriction: bool = True
    mvs: bool = False
    field: FieldConfig = field(default_factory=FieldConfig)
    step_divisions: int = 512
    normal_weight_cutoff: float = 0.0
    geometry_min_opacity: float = 0.9  # depth/normal/MVS losses skip rays less opaque than this
    restriction_resolution: int = 64
    restriction_tolerance: float = 0.2
    chunk_patches: int = 4
    threads: int = 1
    precision: str = "float64"  # field parameter dtype; float32 roughly 1.4x faster
    train_views: tuple | None = None
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.patches_per_step < 1 or self.patch_size < 1:
            raise ValueError("patch counts must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def step_spec(self):
        return StepSpec(divisions=self.step_divisions, jitter=True,
                        normal_weight_cutoff=self.normal_weight_cutoff)

    def to_dict(self):
        d = asdict(self)
        d["train_views"] = list(self.train_views) if self.train_views is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "field" in d and isinstance(d["field"], dict):
            d["field"] = FieldConfig(**d["field"])
        if d.get("train_views") is not None:
            d["train_views"] = tuple(d["train_views"])
        return cls(**d)

    def with_toggles(self, **toggles):
        return replace(self, **toggles)


def parse_config_text(text, base=None):
    """``key = value`` lines mirroring :class:`TrainConfig`; ``weights.rgb`` / ``field.levels`` nest."""
    cfg = base or TrainConfig()
    top, w, fcfg = {}, {}, {}
    types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key.startswith("weights."):
            w[key[8:]] = float(val)
        elif key.startswith("field."):
            fcfg[key[6:]] = _coerce(val, type(getattr(cfg.field, key[6:])))
        elif key in types:
            cur = getattr(cfg, key)
            if key == "train_views":
                top[key] = tuple(int(x) for x in val.replace(",", " ").split()) if val.lower() != "none" else None
            else:
                top[key] = _coerce(val, type(cur))
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if w:
        top["weights"] = replace(cfg.weights, **w)
    if fcfg:
        top["field"] = replace(cfg.field, **fcfg)
    return replace(cfg, **top)


def _coerce(val, typ):
    if typ is bool:
        if val.lower() in ("1", "true", "yes", "on"):
            return True
        if val.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    return typ(val)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    checkpoint: str | None = None

    def write_csv(self, path):
        cols = ["step", *LOSS_TERMS, "total", "lr", "seconds"]
        with open(path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=cols)
            wr.writeheader()
            for r in self.rows:
                wr.writerow({k: r[k] for k in cols})

    def ema_total(self, alpha=0.05):
        out, ema = [], None
        for r in self.rows:
            ema = r["total"] if ema is None else (1 - alpha) * ema + alpha * r["total"]
            out.append(ema)
        return np.array(out)


class Adam:
    def __init__(self, n, beta1=0.9, beta2=0.99, eps=1e-15, dtype=np.float64):
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * grad
        self.v *= self.b2
        self.v += (1 - self.b2) * grad * grad
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        params -= (lr / c1) * self.m / (np.sqrt(self.v / c2) + self.eps)


def cosine_lr(step, total, lr0, lr1):
    if total <= 1:
        return lr0
    return lr1 + 0.5 * (lr0 - lr1) * (1 + math.cos(math.pi * step / (total - 1)))


def split_views(n_views, test_fraction=0.1):
    """Evenly spaced held-out views: ``round(test_fraction * n)`` (at least one) are held out."""
    n_test = max(1, int(round(test_fraction * n_views)))
    test = sorted({int((i + 0.5) * n_views / n_test) for i in range(n_test)})
    train = [i for i in range(n_views) if i not in test]
    return train, test


@dataclass
class _Batch:
    """Pixels of one chunk: arrays shaped (P, k, k, ...)."""

    u: np.ndarray
    v: np.ndarray
    origin: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray


class Trainer:
    def __init__(self, bundle, config: TrainConfig, mvs_depths=None, restriction=None, field_=None):
        self.bundle = bundle
        self.config = config
        cfg = config
        self.views = list(cfg.train_views) if cfg.train_views is not None else list(range(bundle.n_views))
        cam0 = bundle.cameras[self.views[0]]
        self.sampler = PatchSampler(self.views, cam0.width, cam0.height, cfg.patch_size)
        self.field = field_ or RadianceField(cfg.field, bundle.scene_aabb, seed=cfg.seed,
                                              dtype=np.dtype(cfg.precision).type)
        self.aabb = bundle.scene_aabb
        self.step_spec = cfg.step_spec
        if cfg.restriction and restriction is None:
            restriction = build_restriction(bundle, resolution=cfg.restriction_resolution,
                                            tolerance=cfg.restriction_tolerance, views=self.views,
                                            seed=cfg.seed)
        self.restriction = restriction if cfg.restriction else None
        if cfg.mvs and mvs_depths is None:
            raise ValueError("mvs toggle needs MVS depth maps")
        self.mvs_depths = mvs_depths if cfg.mvs else None
        self.optim = Adam(len(self.field.params), cfg.beta1, cfg.beta2, cfg.adam_eps,
                          self.field.params.data.dtype)
        self.step_index = 0
        w = cfg.weights
        self.use_normals = cfg.mono and (w.normal > 0 or w.grad_normal > 0)

    # ------------------------------------------------------------------ per-chunk work

    def _make_batch(self, view, u, v):
        cam = self.bundle.cameras[view]
        dirs = pixel_directions(cam, u, v)
        o = np.broadcast_to(cam.center, dirs.shape)
        tn, tf, hit = ray_aabb(o.reshape(-1, 3), dirs.reshape(-1, 3), self.aabb)
        tf = np.where(hit, tf, tn)
        return _Batch(u, v, cam.center, dirs, tn.reshape(u.shape), tf.reshape(u.shape))

    def _chunk(self, view, u, v, frac, rng):
        cfg = self.config
        w = cfg.weights
        P = u.shape[0]
        b = self._make_batch(view, u, v)
        img = self.bundle.images[view]
        target = img[v, u]
        res = render_rays(self.field, np.broadcast_to(b.origin, b.dirs.shape).reshape(-1, 3),
                          b.dirs.reshape(-1, 3), b.t_near.ravel(), b.t_far.ravel(), self.step_spec,
                          self.restriction, rng, normals=self.use_normals)
        shape = u.shape
        color = res.color.reshape(shape + (3,))
        depth = res.depth.reshape(shape)
        dvalid = res.depth_valid.reshape(shape)
        gvalid = dvalid & (res.opacity.reshape(shape) >= cfg.geometry_min_opacity)
        terms = dict.fromkeys(LOSS_TERMS, 0.0)
        d_color = np.zeros(shape + (3,))
        d_depth = np.zeros(shape)
        d_ng = d_nm = None

        L, g = huber_rgb(color, target)
        terms["rgb"] = L * frac
        d_color += w.rgb * frac * g

        if cfg.mono:
            mono = self.bundle.mono_depth[view][v, u]
            if cfg.patch:
                al = solve_patch_alignment(mono, depth, gvalid)
                aligned = al.apply(mono)
                Ld, Lg, gd, gg = depth_losses(aligned, depth, gvalid, al.valid, gradients=True)
            else:
                # independent pixels: one alignment over the whole group
                al = solve_patch_alignment(mono.reshape(1, -1, 1), depth.reshape(1, -1, 1),
                                           gvalid.reshape(1, -1, 1))
                aligned = al.apply(mono.reshape(1, -1, 1)).reshape(shape)
                Ld, Lg, gd, gg = depth_losses(aligned, depth, gvalid & bool(al.valid[0]), gradients=False)
            terms["depth"] = Ld * frac
            terms["grad_depth"] = Lg * frac
            d_depth += frac * (w.depth * gd + w.grad_depth * gg)
            if self.use_normals:
                mono_n = self.bundle.mono_normal[view][v, u]
                ng = res.normal_grad.reshape(shape + (3,))
                nm = res.normal_mlp.reshape(shape + (3,))
                nv = res.normal_valid.reshape(shape) & gvalid
                Ln, Lgn, dng, dnm, dng_grad = normal_losses(mono_n, ng, nm, nv, gradients=cfg.patch)
                terms["normal"] = Ln * frac
                terms["grad_normal"] = Lgn * frac
                d_ng = frac * (w.normal * dng + w.grad_normal * dng_grad)
                d_nm = frac * w.normal * dnm

        if self.mvs_depths is not None:
            mvs = self.mvs_depths[view][v, u]
            Lm, gm = mvs_depth_loss(mvs, depth, gvalid)
            terms["mvs"] = Lm * frac
            d_depth += frac * w.mvs * gm

        records = render_backward(self.field, res.tape, d_color.reshape(-1, 3), d_depth.ravel(),
                                  None if d_ng is None else d_ng.reshape(-1, 3),
                                  None if d_nm is None else d_nm.reshape(-1, 3), defer=True)

        if cfg.virtual and (w.ssim > 0 or w.ncc > 0):
            cam = self.bundle.cameras[view]
            sw = self.bundle.scene_width
            o_star = np.stack([sample_virtual_origin(cam.center, sw, rng, self.aabb) for _ in range(P)])
            vp = correspond_and_render(self.field, self.restriction, cam.center, b.dirs, depth, dvalid,
                                       o_star[:, None, None, :], self.aabb, self.step_spec, rng,
                                       scene_width=sw)
            Ls, gs = masked_ssim(vp.render.color, target, vp.mask)
            Lc, gc = masked_ncc(vp.render.color, target, vp.mask)
            terms["ssim"] = Ls * frac
            terms["ncc"] = Lc * frac
            dv = frac * (w.ssim * gs + w.ncc * gc)
            records += render_backward(self.field, vp.render.tape, dv.reshape(-1, 3), defer=True)
        return terms, records

    # ------------------------------------------------------------------ step

    def _step_inputs(self, step):
        cfg = self.config
        view = self.sampler.view_for_step(step)
        rng = np.random.default_rng([cfg.seed, step])
        P = cfg.patches_per_step
        if cfg.patch:
            patches = self.sampler.sample(rng, P, view)
            uu = np.stack([p.pixel_grid()[0] for p in patches])
            vv = np.stack([p.pixel_grid()[1] for p in patches])
        else:
            uu, vv = self.sampler.sample_pixels(rng, P, view)
        chunks = []
        C = cfg.chunk_patches
        for ci, s in enumerate(range(0, P, C)):
            sl = slice(s, s + C)
            n = uu[sl].shape[0]
            chunks.append((view, uu[sl], vv[sl], n / P, np.random.default_rng([cfg.seed, step, ci + 1])))
        return chunks

    def step(self, pool=None):
        cfg = self.config
        chunks = self._step_inputs(self.step_index)
        if pool is None:
            results = [self._chunk(*c) for c in chunks]
        else:
            results = list(pool.map(lambda c: self._chunk(*c), chunks))
        terms = dict.fromkeys(LOSS_TERMS, 0.0)
        p = self.field.params
        p.zero_grad()
        for t, recs in results:  # fixed chunk order keeps the reduction deterministic
            for k in LOSS_TERMS:
                terms[k] += t[k]
            for r in recs:
                r.apply(p)
        w = cfg.weights.as_dict()
        total = sum(w[k] * terms[k] for k in LOSS_TERMS)
        if not np.isfinite(total) or not np.all(np.isfinite(p.grad)):
            raise TrainingDivergedError(self.step_index, terms)
        lr = cosine_lr(self.step_index, cfg.steps, cfg.lr, cfg.lr_final)
        self.optim.step(p.data, p.grad, lr)
        self.step_index += 1
        return terms, total, lr

    def run(self, log_every=None, progress=None):
        cfg = self.config
        log = TrainLog()
        every = log_every or cfg.log_every
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
            try:
                while self.step_index < cfg.steps:
                    terms, total, lr = self.step(pool)
                    s = self.step_index - 1
                    if s % every == 0 or self.step_index == cfg.steps:
                        row = {"step": s, **terms, "total": total, "lr": lr,
                               "seconds": time.perf_counter() - t0}
                        log.rows.append(row)
                        if progress is not None:
                            progress(row)
            finally:
                if pool is not None:
                    pool.shutdown()
        return log


def train(bundle, config: TrainConfig, mvs_depths=None, restriction=None, checkpoint=None, progress=None):
    """Train a field on a bundle; returns ``(field, TrainLog)``."""
    bundle.validate(min_views=2)
    tr = Trainer(bundle, config, mvs_depths, restriction)
    log = tr.run(progress=progress)
    if checkpoint is not None:
        tr.field.save(checkpoint, step=tr.step_index, extra={"train_config": config.to_dict()})
        log.checkpoint = str(checkpoint)
    tr.field.restriction = tr.restriction
    return tr.field, log


# --------------------------------------------------------------------------- evaluation

def psnr(pred, gt):
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, -10 * math.log10(mse))


def tiled_ssim(pred, gt, tile=8):
    """Mean single-window SSIM over non-overlapping ``tile x tile`` blocks."""
    H, W = pred.shape[:2]
    ht, wt = H // tile, W // tile
    a = pred[:ht * tile, :wt * tile].reshape(ht, tile, wt, tile, 3).transpose(0, 2, 1, 3, 4)
    b = gt[:ht * tile, :wt * tile].reshape(ht, tile, wt, tile, 3).transpose(0, 2, 1, 3, 4)
    L, _ = masked_ssim(a.reshape(-1, tile, tile, 3), b.reshape(-1, tile, tile, 3))
    return 1.0 - L


def evaluate_split(field_, bundle, heldout, restriction=None, step_divisions=512):
    spec = StepSpec(divisions=step_divisions, jitter=False)
    ps, ss = [], []
    for i in heldout:
        out = render_image(field_, bundle.cameras[i], bundle.scene_aabb, spec, restriction, normals=False)
        ps.append(psnr(out["color"], bundle.images[i]))
        ss.append(tiled_ssim(out["color"], bundle.images[i]))
    return float(np.mean(ps)), float(np.mean(ss))
