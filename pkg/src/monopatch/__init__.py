"""Monocular-guided, patch-based radiance fields for sparse-view scene geometry."""

__version__ = "0.1.0"

from .camera import Camera, PatchSampler, PixelPatch, project, unproject
from .estimator import MonoPatchField
from .field import FieldConfig, RadianceField
from .losses import LossWeights
from .recon import FusedCloud, FusionParams, GeometryScore, fuse_depth_maps, render_depth_maps, score_geometry
from .render import StepSpec, render_image, render_rays
from .restriction import RansacDepthAligner, RestrictionGrid, build_restriction
from .scene import CueSpec, SceneBundle, SceneSpec, generate_synthetic_scene, make_scene
from .trainer import TrainConfig, TrainLog, Trainer, evaluate_split, train

__all__ = [
    "Camera", "CueSpec", "FieldConfig", "FusedCloud", "FusionParams", "GeometryScore", "LossWeights",
    "MonoPatchField", "PatchSampler", "PixelPatch", "RadianceField", "RansacDepthAligner", "RestrictionGrid",
    "SceneBundle", "SceneSpec", "StepSpec", "TrainConfig", "TrainLog", "Trainer", "build_restriction",
    "evaluate_split", "fuse_depth_maps", "generate_synthetic_scene", "make_scene", "project", "render_depth_maps",
    "render_image", "render_rays", "score_geometry", "train", "unproject",
]
