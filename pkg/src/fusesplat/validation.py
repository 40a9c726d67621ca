"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import DatasetError, InvalidParameterError, ShapeError, ValidationError
from .geometry import Camera
from .scene import MultimodalScene


def check_image(img, name="image", channels=3):
    """Return ``img`` as a finite float64 (H, W, channels) array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2 and channels == 3:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != channels:
        raise ShapeError(f"{name} must have shape (H, W, {channels}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_tau(tau, n):
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    if tau.shape[0] != n:
        raise ShapeError(f"tau has {tau.shape[0]} entries for {n} primitives")
    if not np.all(np.isfinite(tau)) or tau.min(initial=0.0) < 0.0 or tau.max(initial=0.0) > 1.0:
        raise ValidationError("tau must be finite and lie in [0, 1]")
    return tau


def check_scene(scene):
    if not isinstance(scene, MultimodalScene):
        raise ValidationError(f"expected a MultimodalScene, got {type(scene).__name__}")
    scene.visible.check_finite()
    scene.infrared.check_finite()
    return scene


def check_cameras(cameras):
    if isinstance(cameras, Camera):
        return [cameras]
    cameras = list(cameras)
    for c in cameras:
        if not isinstance(c, Camera):
            raise ValidationError(f"expected Camera objects, got {type(c).__name__}")
    return cameras


def check_dataset(data, split=None):
    """Accept a decoded dataset, an index, or a dataset directory."""
    from .dataio import DatasetIndex, MultimodalDataset, load_dataset

    if isinstance(data, (str, Path)):
        data = load_dataset(data)
    if isinstance(data, DatasetIndex):
        data = data.load(split)
    if not isinstance(data, MultimodalDataset):
        raise ValidationError(f"expected a dataset, index or directory, got {type(data).__name__}")
    if len(data) == 0:
        raise DatasetError("dataset has no views")
    for cam, V, T in zip(data.cameras, data.visible, data.infrared):
        shape = (cam.height, cam.width, 3)
        if check_image(V, "visible image").shape != shape or check_image(T, "infrared image").shape != shape:
            raise ShapeError(f"image shapes {V.shape}/{T.shape} do not match camera {shape}")
    return data


def check_positive(value, name, integer=False):
    if integer and (isinstance(value, bool) or int(value) != value):
        raise InvalidParameterError(f"{name} must be an integer, got {value!r}")
    if not value > 0:
        raise InvalidParameterError(f"{name} must be positive, got {value!r}")
    return int(value) if integer else float(value)
