"""``monopatch`` command line: synth, train, render, restriction, fuse, eval, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .camera import Camera
from .io import (BundleFormatError, _atomic_write_text, load_bundle, load_depth_dir, read_ply, save_bundle,
                 write_pfm, write_png)
from .recon import (FusionParams, depth_metrics, export_cloud, fuse_depth_maps, render_depth_maps,
                    score_geometry)
from .render import StepSpec, render_image
from .restriction import NoValidAlignmentError, RestrictionGrid, build_restriction
from .scene import CueSpec, make_scene, simulate_mvs_depth
from .trainer import TrainConfig, Trainer, evaluate_split, parse_config_text, split_views

ABLATION_ROWS = {
    "baseline": (),
    "mono": ("mono",),
    "restriction": ("restriction",),
    "patch+mono": ("patch", "mono"),
    "patch+virtual": ("patch", "virtual"),
    "patch+mono+virtual": ("patch", "mono", "virtual"),
    "full": ("patch", "mono", "virtual", "restriction"),
}
TOGGLES = ("patch", "mono", "virtual", "restriction")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def version_string():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict
    outputs: dict
    version: str = field(default_factory=version_string)
    wall_seconds: float = 0.0

    def write(self, path):
        _atomic_write_text(path, json.dumps(self.__dict__, indent=1, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def default_threads():
    env = os.environ.get("MONOPATCH_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"MONOPATCH_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("MONOPATCH_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _taus(text):
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must be positive")
    return vals


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _disabled(items):
    out = set()
    for it in items or []:
        for name in it.split(","):
            name = name.strip()
            if name not in TOGGLES:
                raise UsageError(f"--disable: unknown component {name!r} (choose from {', '.join(TOGGLES)})")
            out.add(name)
    return out


def build_parser():
    p = _Parser(prog="monopatch", description="Monocular-guided patch-based radiance fields on CPU.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--spec", choices=("box", "plane"), default="box")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=_positive_int)
    s.add_argument("--width", type=_positive_int)
    s.add_argument("--height", type=_positive_int)
    s.add_argument("--sfm-points", type=int, default=400)
    s.add_argument("--sfm-outliers", type=float, default=0.1)
    s.add_argument("--warp", type=float, default=CueSpec.warp_amplitude)
    s.add_argument("--normal-noise", type=float, default=CueSpec.normal_noise_deg)
    s.add_argument("--mvs-noise", type=float, default=0.005, help="relative noise of the stand-in MVS depth")

    t = sub.add_parser("train", help="train a field on a scene directory")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--disable", action="append", metavar="COMPONENT",
                   help="mono, virtual, restriction or patch (repeatable or comma-separated)")
    t.add_argument("--mvs-depth", help="directory of ####.pfm depth maps (0 = missing)")
    t.add_argument("--steps", type=_positive_int)
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=_positive_int)
    t.add_argument("--holdout", action="store_true", help="hold out 10%% of views and report PSNR/SSIM")

    r = sub.add_parser("render", help="render color, depth and normals for every view")
    r.add_argument("--scene", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--restriction", help="grid file; defaults to restriction.grid beside the checkpoint")
    r.add_argument("--divisions", type=_positive_int, default=512)
    r.add_argument("--views", type=lambda s: [int(x) for x in s.split(",")])

    g = sub.add_parser("restriction", help="build the density restriction grid")
    g.add_argument("--scene", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--resolution", type=_positive_int, default=64)
    g.add_argument("--tolerance", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("fuse", help="fuse per-view depth maps into a point cloud")
    f.add_argument("--depth", required=True)
    f.add_argument("--out", required=True, help="output .ply")
    f.add_argument("--cameras", help="cameras.json; defaults to one in or beside the depth directory")
    f.add_argument("--rel-depth", type=float, default=FusionParams.rel_depth)
    f.add_argument("--min-support", type=int, default=FusionParams.min_support)
    f.add_argument("--normal-deg", type=float, default=FusionParams.normal_deg)
    f.add_argument("--binary", action="store_true")

    e = sub.add_parser("eval", help="score a point cloud (and optionally depth maps) against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=_taus, default=(0.02, 0.05))
    e.add_argument("--absolute", action="store_true", help="thresholds in world units instead of scene-width fractions")
    e.add_argument("--scene", help="scene directory supplying the scene width")
    e.add_argument("--pred-depth", help="rendered depth directory for rel / inlier ratio")
    e.add_argument("--gt-depth", help="ground-truth depth directory")
    e.add_argument("--out", help="JSON report path")

    a = sub.add_parser("ablate", help="train every toggle combination and tabulate the results")
    a.add_argument("--scene", help="scene directory; omitted: generate --spec/--seed")
    a.add_argument("--spec", choices=("box", "plane"), default="box")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--rows", default=",".join(ABLATION_ROWS),
                   help=f"comma-separated subset of {', '.join(ABLATION_ROWS)}, or mvs")
    a.add_argument("--steps", type=_positive_int)
    a.add_argument("--threads", type=_positive_int)
    return p


# --------------------------------------------------------------------------- commands

def _load_config(path, base=None):
    if path is None:
        return base or TrainConfig()
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        d = json.loads(text)
        return TrainConfig.from_dict(d.get("config", d))
    return parse_config_text(text, base)


def cmd_synth(args):
    out = Path(args.out)
    overrides = {k: getattr(args, k) for k in ("width", "height") if getattr(args, k) is not None}
    if args.views is not None:
        overrides["n_views"] = args.views
    cues = CueSpec(warp_amplitude=args.warp, normal_noise_deg=args.normal_noise)
    bundle, gt = make_scene(args.spec, args.seed, cues, sfm_count=args.sfm_points,
                            sfm_outliers=args.sfm_outliers, **overrides)
    save_bundle(bundle, out, gt)
    mvs = simulate_mvs_depth(gt, args.mvs_noise, seed=args.seed + 3)
    (out / "mvs_depth").mkdir(exist_ok=True)
    for i, d in enumerate(mvs):
        write_pfm(out / "mvs_depth" / f"{i:04d}.pfm", d)
    return {"scene": str(out)}, {"spec": args.spec, "views": bundle.n_views}


def cmd_train(args):
    bundle = load_bundle(args.scene)
    cfg = _load_config(args.config)
    toggles = {k: False for k in _disabled(args.disable)}
    if args.mvs_depth:
        toggles["mvs"] = True
    if args.steps:
        toggles["steps"] = args.steps
    if args.seed is not None:
        toggles["seed"] = args.seed
    toggles["threads"] = args.threads or default_threads()
    heldout = []
    if args.holdout:
        train_v, heldout = split_views(bundle.n_views)
        toggles["train_views"] = tuple(train_v)
    cfg = cfg.with_toggles(**toggles)
    mvs = None
    if args.mvs_depth:
        mvs = load_depth_dir(args.mvs_depth)
        if len(mvs) != bundle.n_views:
            raise BundleFormatError(f"{args.mvs_depth}: {len(mvs)} depth maps for {bundle.n_views} views")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr = Trainer(bundle, cfg, mvs)
    log = tr.run(progress=lambda row: print(f"step {row['step']:6d}  loss {row['total']:.5f}", file=sys.stderr))
    ckpt = out / "field.ckpt"
    tr.field.save(ckpt, step=tr.step_index, extra={"train_config": _model_config(cfg)})
    log.checkpoint = str(ckpt)
    log.write_csv(out / "train_log.csv")
    outputs = {"checkpoint": str(ckpt), "log": str(out / "train_log.csv")}
    if tr.restriction is not None:
        tr.restriction.save(out / "restriction.grid")
        outputs["restriction"] = str(out / "restriction.grid")
    result = {"steps": tr.step_index}
    if heldout:
        ps, ss = evaluate_split(tr.field, bundle, heldout, tr.restriction, cfg.step_divisions)
        result.update(psnr=ps, ssim=ss, heldout=heldout)
        _atomic_write_text(out / "heldout.json", json.dumps(result, indent=1))
    return outputs, cfg.to_dict(), result


def _model_config(cfg):
    d = cfg.to_dict()
    d.pop("threads")  # runtime only: checkpoints must not depend on it
    return d


def _restriction_for(args):
    path = Path(args.restriction) if args.restriction else Path(args.checkpoint).with_name("restriction.grid")
    if path.exists():
        return RestrictionGrid.load(path)
    if args.restriction:
        raise FileNotFoundError(f"restriction grid not found: {path}")
    return None


def cmd_render(args):
    from .field import RadianceField
    bundle = load_bundle(args.scene)
    field_, _ = RadianceField.load(args.checkpoint)
    grid = _restriction_for(args)
    out = Path(args.out)
    for sub in ("color", "depth", "normal"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    views = args.views if args.views is not None else range(bundle.n_views)
    spec = StepSpec(divisions=args.divisions, jitter=False)
    for i in views:
        if not 0 <= i < bundle.n_views:
            raise ValueError(f"--views: no view {i}")
        r = render_image(field_, bundle.cameras[i], bundle.scene_aabb, spec, grid, normals=True)
        valid = r["opacity"] >= 0.5
        write_png(out / "color" / f"{i:04d}.png", r["color"])
        write_pfm(out / "depth" / f"{i:04d}.pfm", np.where(valid, r["depth"], 0.0))
        write_pfm(out / "normal" / f"{i:04d}.pfm", r["normal_grad"])
    shutil.copyfile(Path(args.scene) / "cameras.json", out / "cameras.json")
    return {"color": str(out / "color"), "depth": str(out / "depth"), "normal": str(out / "normal")}, \
        {"divisions": args.divisions, "restriction": grid is not None}


def cmd_restriction(args):
    bundle = load_bundle(args.scene)
    grid = build_restriction(bundle, resolution=args.resolution, tolerance=args.tolerance, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid.save(out / "restriction.grid")
    summary = {"fraction": grid.fraction, "resolution": list(grid.resolution),
               "alignments": {str(i): {"scale": float(a.scale), "shift": float(a.shift), "valid": bool(a.valid)}
                              for i, a in grid.alignments.items()}}
    _atomic_write_text(out / "restriction.json", json.dumps(summary, indent=1))
    print(f"labeled fraction {grid.fraction:.4f}")
    return {"grid": str(out / "restriction.grid"), "summary": str(out / "restriction.json")}, \
        {"resolution": args.resolution, "tolerance": args.tolerance}


def _find_cameras(depth_dir, explicit):
    if explicit:
        return Path(explicit)
    for cand in (Path(depth_dir) / "cameras.json", Path(depth_dir).parent / "cameras.json"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no cameras.json in or beside {depth_dir}; pass --cameras")


def _normals_beside(depth_dir, n):
    ndir = Path(depth_dir).parent / "normal"
    if not ndir.is_dir():
        return None
    maps = load_depth_dir(ndir)
    return maps if len(maps) == n else None


def cmd_fuse(args):
    from .recon import DepthMap
    depths = load_depth_dir(args.depth)
    cams = [Camera.from_dict(d) for d in json.loads(_find_cameras(args.depth, args.cameras).read_text())]
    if len(cams) != len(depths):
        raise BundleFormatError(f"{len(depths)} depth maps but {len(cams)} cameras")
    normals = _normals_beside(args.depth, len(depths))
    colors = None
    cdir = Path(args.depth).parent / "color"
    if cdir.is_dir():
        from .io import read_png
        files = sorted(cdir.glob("[0-9][0-9][0-9][0-9].png"))
        if len(files) == len(depths):
            colors = [read_png(p) for p in files]
    maps = {}
    for i, d in enumerate(depths):
        valid = np.isfinite(d) & (d > 0)
        maps[i] = DepthMap(np.where(valid, d, 0.0), valid, None if normals is None else normals[i],
                           None if colors is None else colors[i])
    params = FusionParams(args.rel_depth, args.min_support, args.normal_deg)
    cloud = fuse_depth_maps(maps, cams, params)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_cloud(cloud, args.out, binary=args.binary)
    print(f"fused {len(cloud)} points")
    return {"cloud": str(args.out)}, params.__dict__


def _scene_width(args, gt_points):
    if args.scene:
        meta = Path(args.scene) / "scene.json"
        if not meta.exists():
            raise FileNotFoundError(f"{meta} not found")
        aabb = np.asarray(json.loads(meta.read_text())["aabb"], dtype=np.float64)
        return float(np.max(aabb[1] - aabb[0]))
    return float(np.max(gt_points.max(0) - gt_points.min(0)))


def cmd_eval(args):
    pred, _, _ = read_ply(args.pred)
    gt, _, _ = read_ply(args.gt)
    width = 1.0 if args.absolute else _scene_width(args, gt)
    taus = tuple(t * width for t in args.tau)
    score = score_geometry(pred, gt, taus)
    report = {"scene_width": width, "tau_fractions": None if args.absolute else list(args.tau),
              "n_pred": len(pred), "n_gt": len(gt), **score.to_dict()}
    if args.pred_depth or args.gt_depth:
        if not (args.pred_depth and args.gt_depth):
            raise ValueError("--pred-depth and --gt-depth go together")
        pd, gd = load_depth_dir(args.pred_depth), load_depth_dir(args.gt_depth)
        if len(pd) != len(gd):
            raise BundleFormatError(f"{len(pd)} predicted vs {len(gd)} ground-truth depth maps")
        rel, inl = depth_metrics(np.stack(pd), np.stack(gd))
        report.update(rel=rel, inlier_ratio=inl)
    text = json.dumps(report, indent=1)
    print(text)
    outputs = {}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(args.out, text)
        outputs["report"] = args.out
    return outputs, {"tau": list(args.tau), "absolute": args.absolute}


@dataclass
class AblationRow:
    name: str
    toggles: dict
    psnr: float
    ssim: float
    f2: float
    f5: float
    rel: float
    seconds: float


def run_ablation(bundle, gt, base: TrainConfig, rows, mvs_depths=None, progress=None):
    """Train one field per row and score novel views, fused geometry and depth."""
    train_v, test_v = split_views(bundle.n_views)
    sw = bundle.scene_width
    out = []
    for name in rows:
        if name == "mvs":
            tog = dict.fromkeys(TOGGLES, True)
            tog["mvs"] = True
        else:
            on = ABLATION_ROWS[name]
            tog = {k: k in on for k in TOGGLES}
            tog["mvs"] = False
        cfg = base.with_toggles(train_views=tuple(train_v), **tog)
        t0 = time.perf_counter()
        tr = Trainer(bundle, cfg, mvs_depths if tog["mvs"] else None)
        tr.run()
        seconds = time.perf_counter() - t0
        ps, ss = evaluate_split(tr.field, bundle, test_v, tr.restriction, cfg.step_divisions)
        maps = render_depth_maps(tr.field, bundle, tr.restriction, train_v, cfg.step_divisions, normals=False)
        cloud = fuse_depth_maps(maps, bundle.cameras)
        if len(cloud):
            sc = score_geometry(cloud, gt.points, (0.02 * sw, 0.05 * sw))
            f2, f5 = sc.fscore
        else:
            f2 = f5 = 0.0
        rels = [depth_metrics(maps[i].depth, gt.depth[i], maps[i].valid)[0] for i in train_v if maps[i].valid.any()]
        rel = float(np.mean(rels)) if rels else float("nan")
        row = AblationRow(name, tog, ps, ss, f2, f5, rel, seconds)
        out.append(row)
        if progress is not None:
            progress(row)
    return out


def write_ablation_csv(rows, path):
    cols = ["row", *TOGGLES, "mvs", "psnr", "ssim", "f1_2pct", "f1_5pct", "rel", "seconds"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.name, *(int(r.toggles[k]) for k in TOGGLES), int(r.toggles["mvs"]),
                        f"{r.psnr:.3f}", f"{r.ssim:.4f}", f"{r.f2:.3f}", f"{r.f5:.3f}", f"{r.rel:.4f}",
                        f"{r.seconds:.1f}"])


def cmd_ablate(args):
    from .io import load_gt_depths
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    for r in rows:
        if r not in ABLATION_ROWS and r != "mvs":
            raise UsageError(f"--rows: unknown row {r!r}")
    cfg = _load_config(args.config)
    over = {"threads": args.threads or default_threads()}
    if args.steps:
        over["steps"] = args.steps
    cfg = cfg.with_toggles(**over)
    if args.scene:
        bundle = load_bundle(args.scene)
        gt_pts, _, _ = read_ply(Path(args.scene) / "gt_points.ply")
        from types import SimpleNamespace
        gt = SimpleNamespace(points=gt_pts, depth=load_gt_depths(args.scene, bundle.n_views))
        mvs = load_depth_dir(Path(args.scene) / "mvs_depth") if "mvs" in rows else None
    else:
        bundle, gt = make_scene(args.spec, args.seed)
        mvs = simulate_mvs_depth(gt, seed=args.seed + 3) if "mvs" in rows else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_ablation(bundle, gt, cfg, rows, mvs, progress=lambda r: print(
        f"{r.name:20s} PSNR {r.psnr:6.2f}  SSIM {r.ssim:.3f}  F2 {r.f2:6.2f}  F5 {r.f5:6.2f}  "
        f"rel {r.rel:.4f}  {r.seconds:6.1f}s", file=sys.stderr))
    write_ablation_csv(result, out / "ablation.csv")
    return {"csv": str(out / "ablation.csv")}, cfg.to_dict()


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "restriction": cmd_restriction,
            "fuse": cmd_fuse, "eval": cmd_eval, "ablate": cmd_ablate}


def _manifest_path(args):
    out = Path(args.out) if getattr(args, "out", None) else None
    if out is None:
        return None
    if args.command in ("fuse", "eval"):
        return out.with_name(out.name + ".manifest.json")
    return out / "manifest.json"


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        res = COMMANDS[args.command](args)
        outputs, config = res[0], res[1]
        mpath = _manifest_path(args)
        if mpath is not None:
            inputs = {k: v for k, v in vars(args).items()
                      if k in ("scene", "config", "checkpoint", "depth", "pred", "gt", "mvs_depth",
                               "restriction", "cameras", "pred_depth", "gt_depth") and v is not None}
            RunManifest(args.command, argv, config, getattr(args, "seed", None), inputs, outputs,
                        wall_seconds=time.perf_counter() - t0).write(mpath)
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, BundleFormatError, FileNotFoundError, NoValidAlignmentError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
