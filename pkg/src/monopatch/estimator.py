"""scikit-learn style wrapper: ``fit`` a field on a scene bundle, ``predict`` depth maps."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .field import FieldConfig
from .losses import LossWeights
from .recon import fuse_depth_maps, render_depth_maps
from .render import StepSpec, render_image
from .scene import SceneBundle
from .trainer import TrainConfig, Trainer, evaluate_split


def check_bundle(bundle, min_views=2):
    """Validate a scene bundle the way every entry point expects it."""
    if not isinstance(bundle, SceneBundle):
        raise TypeError(f"expected a SceneBundle, got {type(bundle).__name__}")
    return bundle.validate(min_views=min_views)


def check_views(views, n_views):
    if views is None:
        return list(range(n_views))
    views = [int(v) for v in np.atleast_1d(views)]
    bad = [v for v in views if not 0 <= v < n_views]
    if bad:
        raise ValueError(f"view indices {bad} out of range for {n_views} views")
    return views


class MonoPatchField(BaseEstimator):
    """Radiance field trained with patch-level monocular and virtual-view guidance.

    Hyperparameters mirror :class:`~monopatch.trainer.TrainConfig`; ``get_params``
    and ``set_params`` work as in scikit-learn so configurations can be cloned
    and swept.
    """

    def __init__(self, steps=2000, patches_per_step=128, patch_size=8, lr=1e-2, lr_final=1e-3, seed=0,
                 patch=True, mono=True, virtual=True, restriction=True, mvs=False, weights=None,
                 field_config=None, step_divisions=512, normal_weight_cutoff=0.0, geometry_min_opacity=0.9,
                 chunk_patches=4, threads=1, precision="float64", train_views=None):
        self.steps = steps
        self.patches_per_step = patches_per_step
        self.patch_size = patch_size
        self.lr = lr
        self.lr_final = lr_final
        self.seed = seed
        self.patch = patch
        self.mono = mono
        self.virtual = virtual
        self.restriction = restriction
        self.mvs = mvs
        self.weights = weights
        self.field_config = field_config
        self.step_divisions = step_divisions
        self.normal_weight_cutoff = normal_weight_cutoff
        self.geometry_min_opacity = geometry_min_opacity
        self.chunk_patches = chunk_patches
        self.threads = threads
        self.precision = precision
        self.train_views = train_views

    def to_config(self):
        return TrainConfig(
            steps=self.steps, patches_per_step=self.patches_per_step, patch_size=self.patch_size,
            weights=self.weights or LossWeights(), lr=self.lr, lr_final=self.lr_final, seed=self.seed,
            patch=self.patch, mono=self.mono, virtual=self.virtual, restriction=self.restriction, mvs=self.mvs,
            field=self.field_config or FieldConfig(), step_divisions=self.step_divisions,
            normal_weight_cutoff=self.normal_weight_cutoff, geometry_min_opacity=self.geometry_min_opacity,
            chunk_patches=self.chunk_patches,
            threads=self.threads, precision=self.precision,
            train_views=None if self.train_views is None else tuple(self.train_views))

    def fit(self, X, y=None, mvs_depths=None):
        """Train on bundle ``X``. ``y`` is ignored."""
        bundle = check_bundle(X)
        check_views(self.train_views, bundle.n_views)
        trainer = Trainer(bundle, self.to_config(), mvs_depths)
        self.log_ = trainer.run()
        self.field_ = trainer.field
        self.restriction_ = trainer.restriction
        self.aabb_ = bundle.scene_aabb.copy()
        return self

    def predict(self, X, views=None):
        """Rendered expected depth per view (0 where accumulated opacity < 0.5)."""
        check_is_fitted(self, "field_")
        bundle = check_bundle(X, min_views=1)
        maps = render_depth_maps(self.field_, bundle, self.restriction_, check_views(views, bundle.n_views),
                                 self.step_divisions, normals=False)
        return [maps[i].depth for i in sorted(maps)]

    def render(self, camera, normals=False):
        check_is_fitted(self, "field_")
        spec = StepSpec(divisions=self.step_divisions, jitter=False)
        return render_image(self.field_, camera, self.aabb_, spec, self.restriction_, normals=normals)

    def point_cloud(self, X, views=None):
        check_is_fitted(self, "field_")
        bundle = check_bundle(X)
        maps = render_depth_maps(self.field_, bundle, self.restriction_, check_views(views, bundle.n_views),
                                 self.step_divisions, normals=True)
        return fuse_depth_maps(maps, bundle.cameras)

    def score(self, X, views):
        """Mean PSNR over the given (held-out) views."""
        check_is_fitted(self, "field_")
        bundle = check_bundle(X, min_views=1)
        psnr, _ = evaluate_split(self.field_, bundle, check_views(views, bundle.n_views), self.restriction_,
                                 self.step_divisions)
        return psnr
