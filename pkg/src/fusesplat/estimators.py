"""Estimator-style wrappers around the two training stages.

``SceneReconstructor`` fits per-modality primitives to a dataset,
``CrossModalAdjuster`` fits the opacity-modulating network to a trained
scene, and ``FusionPipeline`` chains both and renders fused views.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cma import cma_forward
from .metrics import evaluate_fused, psnr
from .optimizer import TrainConfig, train_stage1, train_stage2
from .rasterizer import render, render_fused
from .validation import check_cameras, check_dataset, check_positive, check_scene

_CONFIG_FIELDS = {f.name for f in fields(TrainConfig)}


def _make_config(base, **overrides):
    cfg = TrainConfig() if base is None else base
    values = cfg.to_dict()
    values.update({k: v for k, v in overrides.items() if k in _CONFIG_FIELDS})
    return TrainConfig(**values)


class SceneReconstructor(BaseEstimator):
    """Fit visible and infrared primitive sets to posed image pairs.

    ``config`` supplies any training option not exposed as a parameter.
    After fitting, ``scene_`` holds the result and ``history_`` the
    per-iteration log.
    """

    def __init__(self, n_iter=15000, densify_grad_threshold=2e-4, max_gaussians=20000,
                 n_init_points=100, sh_degree=1, seed=0, config=None):
        self.n_iter = n_iter
        self.densify_grad_threshold = densify_grad_threshold
        self.max_gaussians = max_gaussians
        self.n_init_points = n_init_points
        self.sh_degree = sh_degree
        self.seed = seed
        self.config = config

    def _config(self):
        n_iter = check_positive(self.n_iter, "n_iter", integer=True)
        base = self.config
        until = base.densify_until if base is not None else None
        return _make_config(base, stage1_iters=n_iter, densify_grad_threshold=self.densify_grad_threshold,
                            max_gaussians=self.max_gaussians, n_init_points=self.n_init_points,
                            sh_degree=self.sh_degree, seed=self.seed, densify_until=until)

    def fit(self, X, y=None):
        data = check_dataset(X, split="train")
        result = train_stage1(data, self._config())
        self.scene_ = result.scene
        self.history_ = result.history
        return self

    def predict(self, X):
        """Render both modalities for each camera; returns a list of ``(V, T)`` pairs."""
        check_is_fitted(self, "scene_")
        return [(render(self.scene_.visible, c).image, render(self.scene_.infrared, c).image)
                for c in check_cameras(X)]

    def score(self, X, y=None):
        """Mean PSNR over both modalities and every view of ``X``."""
        check_is_fitted(self, "scene_")
        data = check_dataset(X)
        values = []
        for (Vr, Tr), V, T in zip(self.predict(data.cameras), data.visible, data.infrared):
            values += [psnr(np.clip(Vr, 0, 1), V), psnr(np.clip(Tr, 0, 1), T)]
        return float(np.mean(values))


class CrossModalAdjuster(TransformerMixin, BaseEstimator):
    """Fit the opacity-modulating network on a trained scene.

    ``fit(scene, dataset)`` trains; ``transform(scene)`` returns the
    per-primitive opacity scales in concatenation order.
    """

    def __init__(self, n_iter=15000, lambda1=1.0, lambda2=2.0, hidden=(64, 64), learning_rate=1e-3,
                 joint_finetune=False, seed=0, config=None):
        self.n_iter = n_iter
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.joint_finetune = joint_finetune
        self.seed = seed
        self.config = config

    def _config(self):
        n_iter = check_positive(self.n_iter, "n_iter", integer=True)
        return _make_config(self.config, stage2_iters=n_iter, lambda1=self.lambda1, lambda2=self.lambda2,
                            cma_hidden=tuple(self.hidden), lr_cma=self.learning_rate,
                            joint_finetune=self.joint_finetune, seed=self.seed)

    def fit(self, X, y=None):
        scene = check_scene(X)
        if y is None:
            raise ValueError("CrossModalAdjuster.fit needs the training dataset as y")
        data = check_dataset(y, split="train")
        result = train_stage2(scene, data, self._config())
        self.params_ = result.params
        self.scene_ = result.scene
        self.history_ = result.history
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return cma_forward(self.params_, check_scene(X))


class FusionPipeline(BaseEstimator):
    """Reconstruction followed by cross-modal adjustment; predicts fused renders."""

    def __init__(self, stage1_iters=15000, stage2_iters=15000, lambda1=1.0, lambda2=2.0,
                 densify_grad_threshold=2e-4, max_gaussians=20000, seed=0, config=None):
        self.stage1_iters = stage1_iters
        self.stage2_iters = stage2_iters
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.densify_grad_threshold = densify_grad_threshold
        self.max_gaussians = max_gaussians
        self.seed = seed
        self.config = config

    def fit(self, X, y=None):
        data = check_dataset(X, split="train")
        cfg = self.config
        recon = SceneReconstructor(self.stage1_iters, self.densify_grad_threshold, self.max_gaussians,
                                   seed=self.seed, config=cfg,
                                   n_init_points=cfg.n_init_points if cfg else 100,
                                   sh_degree=cfg.sh_degree if cfg else 1).fit(data)
        adjuster = CrossModalAdjuster(self.stage2_iters, self.lambda1, self.lambda2, seed=self.seed,
                                      config=cfg, hidden=cfg.cma_hidden if cfg else (64, 64),
                                      learning_rate=cfg.lr_cma if cfg else 1e-3).fit(recon.scene_, data)
        self.reconstructor_ = recon
        self.adjuster_ = adjuster
        self.scene_ = adjuster.scene_
        self.tau_ = adjuster.transform(self.scene_)
        return self

    def predict(self, X):
        check_is_fitted(self, "tau_")
        return [render_fused(self.scene_, c, self.tau_).image for c in check_cameras(X)]

    def score(self, X, y=None):
        """Mean fused ``ssim_avg`` over every view of ``X``."""
        data = check_dataset(X)
        fused = self.predict(data.cameras)
        return float(np.mean([evaluate_fused(np.clip(F, 0, 1), V, T).ssim_avg
                              for F, V, T in zip(fused, data.visible, data.infrared)]))
