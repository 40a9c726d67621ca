"""Visible/infrared Gaussian splatting with a learned cross-modal opacity adjustment."""

__version__ = "0.1.0"

from .cma import CmaParameters, cma_backward, cma_forward, cma_init, load_cma, save_cma
from .dataio import MultimodalDataset, generate_synthetic, load_dataset, read_image, write_image
from .estimators import CrossModalAdjuster, FusionPipeline, SceneReconstructor
from .exceptions import (CheckpointError, ContractViolation, DatasetError, FuseSplatError, ImageDecodeError,
                         InvalidParameterError, SceneFormatError, ShapeError, TrainingError, ValidationError)
from .geometry import Camera, look_at, project_gaussian
from .losses import FusionTargets, ssim, stage1_loss, stage2_loss
from .metrics import FusedScore, evaluate_fused, psnr, report
from .optimizer import TrainConfig, adam_step, densify_and_prune, train_stage1, train_stage2
from .rasterizer import render, render_backward, render_fused, render_single
from .scene import (GaussianPrimitive, GaussianSet, Modality, MultimodalScene, concat_modalities,
                    gaussian_count_ratio, load_scene, save_scene)

__all__ = [
    "__version__",
    "Camera", "look_at", "project_gaussian",
    "GaussianPrimitive", "GaussianSet", "Modality", "MultimodalScene", "concat_modalities",
    "gaussian_count_ratio", "load_scene", "save_scene",
    "render", "render_single", "render_fused", "render_backward",
    "CmaParameters", "cma_init", "cma_forward", "cma_backward", "save_cma", "load_cma",
    "FusionTargets", "ssim", "stage1_loss", "stage2_loss",
    "FusedScore", "psnr", "evaluate_fused", "report",
    "TrainConfig", "adam_step", "densify_and_prune", "train_stage1", "train_stage2",
    "MultimodalDataset", "generate_synthetic", "load_dataset", "read_image", "write_image",
    "SceneReconstructor", "CrossModalAdjuster", "FusionPipeline",
    "FuseSplatError", "InvalidParameterError", "ShapeError", "SceneFormatError", "CheckpointError",
    "DatasetError", "ImageDecodeError", "ContractViolation", "TrainingError", "ValidationError",
]
