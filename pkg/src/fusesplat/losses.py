"""Image objectives with analytic gradients.

Every loss takes images of shape (H, W, C) in [0, 1] and returns a
:class:`LossValue` holding the scalar and its gradient with respect to the
rendered image (the first argument).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .exceptions import InvalidParameterError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class LossValue:
    value: float
    d_image: np.ndarray


@dataclass
class Stage1Loss:
    """Balanced two-modality reconstruction loss and per-render gradients."""

    value: float
    visible: float
    infrared: float
    d_visible: np.ndarray
    d_infrared: np.ndarray


def _as_image(x, name="image"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (H, W) or (H, W, C), got shape {x.shape}")
    return x


def _check_pair(a, b):
    a = _as_image(a, "first image")
    b = _as_image(b, "second image")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


@dataclass
class FusionTargets:
    """Visible and infrared references plus their per-pixel maximum.

    Single-channel infrared inputs are replicated to the visible channel count.
    """

    V: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        V = _as_image(self.V, "V")
        T = _as_image(self.T, "T")
        if T.shape[2] == 1 and V.shape[2] != 1:
            T = np.repeat(T, V.shape[2], axis=2)
        if V.shape != T.shape:
            raise ShapeError(f"V and T shapes differ: {V.shape} vs {T.shape}")
        self.V = V
        self.T = T
        self.max_VT = np.maximum(V, T)


# ---------------------------------------------------------------------------
# L1
# ---------------------------------------------------------------------------


def l1_loss(a, b):
    """Mean absolute difference; the subgradient at ties is zero."""
    a, b = _check_pair(a, b)
    diff = a - b
    return LossValue(float(np.mean(np.abs(diff))), np.sign(diff) / diff.size)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter(x, w):
    """Separable 'valid' correlation over the two spatial axes."""
    r = w.size // 2
    y = correlate1d(x, w, axis=0, mode="constant")[r:x.shape[0] - r]
    return correlate1d(y, w, axis=1, mode="constant")[:, r:x.shape[1] - r]


def _filter_adjoint(g, w):
    """Adjoint of :func:`_filter`: full convolution back to the input size."""
    k = w.size - 1
    gp = np.pad(g, ((k, k), (k, k), (0, 0)))
    return _filter(gp, w[::-1])


def ssim(a, b, with_grad=True):
    """Mean SSIM over all fully-contained windows and channels.

    Returns ``(value, d_value/d_a)``; the gradient is None when
    ``with_grad`` is False.
    """
    a, b = _check_pair(a, b)
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ShapeError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {H}x{W}")
    w = gaussian_window()
    mu_a = _filter(a, w)
    mu_b = _filter(b, w)
    var_a = _filter(a * a, w) - mu_a**2
    var_b = _filter(b * b, w) - mu_b**2
    cov = _filter(a * b, w) - mu_a * mu_b
    A = 2.0 * mu_a * mu_b + SSIM_C1
    B = 2.0 * cov + SSIM_C2
    C = mu_a**2 + mu_b**2 + SSIM_C1
    D = var_a + var_b + SSIM_C2
    smap = (A * B) / (C * D)
    value = float(smap.mean())
    if not with_grad:
        return value, None
    n = smap.size
    dS_dmu = (2.0 * mu_b * B / (C * D) - smap * 2.0 * mu_a / C) / n
    dS_dvar = -smap / D / n
    dS_dcov = 2.0 * A / (C * D) / n
    grad = (_filter_adjoint(dS_dmu - 2.0 * mu_a * dS_dvar - mu_b * dS_dcov, w)
            + 2.0 * a * _filter_adjoint(dS_dvar, w)
            + b * _filter_adjoint(dS_dcov, w))
    return value, grad


def dssim_loss(a, b):
    """``1 - SSIM(a, b)`` as a loss."""
    value, grad = ssim(a, b)
    return LossValue(1.0 - value, -grad)


# ---------------------------------------------------------------------------
# Stage objectives
# ---------------------------------------------------------------------------


def reconstruction_loss(target, render):
    """``||target - render||_1 + (1 - SSIM(target, render))`` with gradient w.r.t. ``render``."""
    target, render = _check_pair(target, render)
    l1 = l1_loss(render, target)
    s, ds = ssim(render, target)
    return LossValue(l1.value + 1.0 - s, l1.d_image - ds)


def stage1_loss(V, V_render, T, T_render, gamma):
    """``gamma * L_visible + (1 - gamma) * L_infrared``."""
    if not 0.0 <= gamma <= 1.0:
        raise InvalidParameterError(f"gamma must lie in [0, 1], got {gamma}")
    lv = reconstruction_loss(V, V_render)
    lt = reconstruction_loss(T, T_render)
    return Stage1Loss(
        value=gamma * lv.value + (1.0 - gamma) * lt.value,
        visible=lv.value, infrared=lt.value,
        d_visible=gamma * lv.d_image, d_infrared=(1.0 - gamma) * lt.d_image,
    )


def _targets(targets, shape):
    if targets.V.shape != shape:
        raise ShapeError(f"fused image shape {shape} does not match targets {targets.V.shape}")
    return targets


def fusion_intensity_loss(I_fuse, targets, lambda1=1.0, lambda2=2.0):
    """``l1 * |F - max(V,T)|_1 + l2 * ((1 - SSIM(F,T)) + (1 - SSIM(F,V)))``."""
    if lambda1 < 0 or lambda2 < 0:
        raise InvalidParameterError("loss weights must be non-negative")
    F = _as_image(I_fuse, "I_fuse")
    _targets(targets, F.shape)
    l1 = l1_loss(F, targets.max_VT)
    s_t, g_t = ssim(F, targets.T)
    s_v, g_v = ssim(F, targets.V)
    value = lambda1 * l1.value + lambda2 * ((1.0 - s_t) + (1.0 - s_v))
    grad = lambda1 * l1.d_image - lambda2 * (g_t + g_v)
    return LossValue(float(value), grad)


def sobel(x):
    """Per-channel Sobel responses ``(gx, gy)`` with replicate padding."""
    x = _as_image(x)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = x.shape[:2]
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    for u in range(3):
        for v in range(3):
            patch = xp[u:u + H, v:v + W]
            if SOBEL_X[u, v]:
                gx += SOBEL_X[u, v] * patch
            if SOBEL_Y[u, v]:
                gy += SOBEL_Y[u, v] * patch
    return gx, gy


def _sobel_adjoint(gx_bar, gy_bar):
    H, W, C = gx_bar.shape
    xp = np.zeros((H + 2, W + 2, C))
    for u in range(3):
        for v in range(3):
            xp[u:u + H, v:v + W] += SOBEL_X[u, v] * gx_bar + SOBEL_Y[u, v] * gy_bar
    # Fold the replicated border back onto the edge pixels.
    xp[1] += xp[0]
    xp[H] += xp[H + 1]
    xp[:, 1] += xp[:, 0]
    xp[:, W] += xp[:, W + 1]
    return xp[1:H + 1, 1:W + 1]


def fusion_gradient_loss(I_fuse, targets):
    """Mean L1 between Sobel responses of ``I_fuse`` and of ``max(V, T)``."""
    F = _as_image(I_fuse, "I_fuse")
    _targets(targets, F.shape)
    if F.shape[0] < 3 or F.shape[1] < 3:
        raise ShapeError("images must be at least 3x3 for the gradient loss")
    fx, fy = sobel(F)
    mx, my = sobel(targets.max_VT)
    dx = fx - mx
    dy = fy - my
    n = 2 * dx.size
    value = (np.abs(dx).sum() + np.abs(dy).sum()) / n
    grad = _sobel_adjoint(np.sign(dx) / n, np.sign(dy) / n)
    return LossValue(float(value), grad)


def stage2_loss(I_fuse, targets, lambda1=1.0, lambda2=2.0):
    """Fusion objective: intensity term plus edge-retention term."""
    li = fusion_intensity_loss(I_fuse, targets, lambda1, lambda2)
    lg = fusion_gradient_loss(I_fuse, targets)
    return LossValue(li.value + lg.value, li.d_image + lg.d_image)
