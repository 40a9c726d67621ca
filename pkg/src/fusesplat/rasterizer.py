"""Tile-based Gaussian splatting: forward compositing and its reverse pass.

A pixel's value is the front-to-back over-composite

    C(x) = sum_k c_k a_k prod_{j<k} (1 - a_j) + T_final * background

with effective opacity ``a_k = min(0.99, tau_k * sigmoid(logit_k) * G_k(x))``.
Contributions with ``a_k < 1/255`` are skipped and a pixel stops once its
transmittance would fall below 1e-4. Primitives are sorted globally by
camera depth with ties broken by global index.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numba
import numpy as np

from . import _kernels
from .exceptions import ContractViolation, ShapeError
from .geometry import (
    build_covariances,
    covariance_vjp,
    eval_sh_colors,
    project_gaussians,
    project_gaussians_vjp,
    sh_basis,
    sh_basis_jacobian,
)
from .scene import concat_modalities, sigmoid

DEFAULT_TILE_SIZE = 16
ALPHA_MIN = _kernels.ALPHA_MIN
ALPHA_MAX = _kernels.ALPHA_MAX
T_MIN = _kernels.T_MIN


def set_num_threads(n):
    """Limit the worker threads used by the tile kernels."""
    numba.set_num_threads(int(n))


@dataclass
class TileBins:
    ranges: np.ndarray
    entries: np.ndarray
    tile_size: int
    n_tiles_x: int
    n_tiles_y: int

    def tile_lists(self):
        """Per-tile arrays of primitive ids, front to back."""
        return [self.entries[a:b] for a, b in self.ranges]


@dataclass
class Splats:
    """Screen-space state of a primitive set for one camera."""

    order: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    colors_raw: np.ndarray
    opacities: np.ndarray
    tau: np.ndarray
    effective_opacity: np.ndarray
    valid: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    projection: object


@dataclass
class RenderOutput:
    """Result of a forward render.

    Attributes
    ----------
    image : (H, W, 3)
    transmittance : (H, W) final transmittance per pixel
    n_contrib : (H, W) number of primitives composited into each pixel
    """

    image: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    last_entry: np.ndarray
    splats: Splats
    bins: TileBins
    background: np.ndarray
    fingerprint: str


@dataclass
class SplatGradients:
    """Gradients of a scalar loss with respect to per-primitive parameters.

    ``d_sh`` has shape (P, K, 3) and is the gradient for each primitive's
    color coefficients. Geometry fields are filled only when requested.
    """

    d_sh: np.ndarray
    d_opacity_logit: np.ndarray
    d_tau: np.ndarray
    d_means2d: np.ndarray
    d_means: np.ndarray | None = None
    d_quats: np.ndarray | None = None
    d_log_scales: np.ndarray | None = None

    @property
    def d_color(self):
        return self.d_sh.reshape(self.d_sh.shape[0], -1)


def _fingerprint(gset, cam, tau, background):
    h = hashlib.sha1()
    for arr in (gset.means, gset.quats, gset.log_scales, gset.opacity_logits, gset.sh, tau,
                np.asarray(background, dtype=np.float64), cam.world_to_camera):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr((cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.znear, cam.zfar)).encode())
    return h.hexdigest()


def _conics(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def footprint_extents(cov2d, effective_opacity):
    """Half-widths of the region where ``opacity * G >= 1/255``.

    Primitives that cannot reach the cutoff anywhere get -1.
    """
    o = np.minimum(effective_opacity, ALPHA_MAX)
    reach = np.full(o.shape, -1.0)
    ok = o >= ALPHA_MIN
    reach[ok] = np.sqrt(2.0 * np.log(255.0 * o[ok]))
    ext = np.stack([reach * np.sqrt(cov2d[:, 0, 0]), reach * np.sqrt(cov2d[:, 1, 1])], axis=1)
    # Small outward margin so pixels sitting exactly on the cutoff are kept.
    ext = np.where(ok[:, None], ext * (1.0 + 1e-9) + 1e-7, -1.0)
    return ext


def depth_order(depths, valid):
    """Front-to-back ids of valid primitives; ties keep global index order."""
    idx = np.flatnonzero(valid)
    return idx[np.argsort(depths[idx], kind="stable")].astype(np.int64)


def tile_bin(means2d, cov2d, effective_opacity, order, tile_size, image_dims):
    """Assign depth-ordered primitives to the tiles their footprint touches.

    ``image_dims`` is ``(width, height)``.
    """
    width, height = image_dims
    ext = footprint_extents(np.asarray(cov2d, dtype=np.float64),
                            np.asarray(effective_opacity, dtype=np.float64))
    ranges, entries = _kernels.bin_tiles(
        np.ascontiguousarray(order, dtype=np.int64), np.ascontiguousarray(means2d, dtype=np.float64),
        np.ascontiguousarray(ext), int(width), int(height), int(tile_size))
    return TileBins(ranges, entries, int(tile_size),
                    -(-int(width) // tile_size), -(-int(height) // tile_size))


def prepare_splats(gset, cam, tau=None):
    """Project ``gset`` into ``cam`` and evaluate per-primitive colors."""
    P = len(gset)
    if tau is None:
        tau = np.ones(P)
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    if tau.shape[0] != P:
        raise ShapeError(f"tau has {tau.shape[0]} entries for {P} primitives")
    cov3d = build_covariances(gset.quats, gset.log_scales) if P else np.zeros((0, 3, 3))
    proj = project_gaussians(gset.means, cov3d, cam)
    offset = gset.means - cam.center
    dist = np.linalg.norm(offset, axis=1)
    dist = np.where(dist > 0, dist, 1.0)
    dirs = offset / dist[:, None]
    colors, raw = eval_sh_colors(gset.sh, dirs)
    opac = sigmoid(gset.opacity_logits)
    eff = tau * opac
    valid = proj.valid & np.all(np.isfinite(proj.cov2d.reshape(P, 4)), axis=1)
    return Splats(
        order=depth_order(proj.depths, valid),
        means2d=proj.means2d, cov2d=proj.cov2d, conics=_conics(proj.cov2d) if P else np.zeros((0, 3)),
        colors=colors, colors_raw=raw, opacities=opac, tau=tau, effective_opacity=eff,
        valid=valid, view_dirs=dirs, view_dist=dist, projection=proj,
    )


def render(gset, cam, tau=None, background=(0.0, 0.0, 0.0), tile_size=DEFAULT_TILE_SIZE):
    """Composite ``gset`` as seen from ``cam`` with per-primitive opacity scales ``tau``."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    splats = prepare_splats(gset, cam, tau)
    W, H = cam.width, cam.height
    bins = tile_bin(splats.means2d, splats.cov2d, splats.effective_opacity, splats.order, tile_size, (W, H))
    image = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    last = np.zeros((H, W), dtype=np.int64)
    count = np.zeros((H, W), dtype=np.int64)
    if len(gset):
        _kernels.composite_forward(
            bins.ranges, bins.entries, np.ascontiguousarray(splats.means2d), np.ascontiguousarray(splats.conics),
            np.ascontiguousarray(splats.colors), np.ascontiguousarray(splats.effective_opacity),
            W, H, int(tile_size), background, image, trans, last, count)
    else:
        image[:] = background
    return RenderOutput(image=image, transmittance=trans, n_contrib=count, last_entry=last,
                        splats=splats, bins=bins, background=background,
                        fingerprint=_fingerprint(gset, cam, splats.tau, background))


def render_single(primitives, cam, background=(0.0, 0.0, 0.0), tile_size=DEFAULT_TILE_SIZE):
    """Standard splatting of one primitive set (every tau equal to one)."""
    return render(primitives, cam, None, background, tile_size)


def render_fused(scene, cam, tau, background=(0.0, 0.0, 0.0), tile_size=DEFAULT_TILE_SIZE):
    """Composite both modalities together, scaling each opacity by ``tau``.

    ``tau`` follows the visible-then-infrared concatenation order.
    """
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    if tau.shape[0] != len(scene):
        raise ShapeError(f"tau has {tau.shape[0]} entries, scene has {len(scene)} primitives")
    return render(concat_modalities(scene), cam, tau, background, tile_size)


def compositing_weight_sum(out):
    """Per-pixel sum of compositing weights for a finished render."""
    s = out.splats
    H, W = out.transmittance.shape
    wsum = np.zeros((H, W))
    if len(s.tau):
        _kernels.composite_weights(out.bins.ranges, out.bins.entries, np.ascontiguousarray(s.means2d),
                                   np.ascontiguousarray(s.conics), np.ascontiguousarray(s.effective_opacity),
                                   W, H, out.bins.tile_size, wsum)
    return wsum


def render_backward(gset, cam, d_image, tau=None, forward=None, geometry=False,
                    background=(0.0, 0.0, 0.0), tile_size=DEFAULT_TILE_SIZE):
    """Gradients of a loss whose image gradient is ``d_image``.

    ``forward`` is the matching :class:`RenderOutput`; it is recomputed when
    omitted and rejected with :class:`ContractViolation` when it was
    produced from different inputs. Mean, rotation and scale gradients are
    computed only with ``geometry=True``.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    P = len(gset)
    tau_arr = np.ones(P) if tau is None else np.asarray(tau, dtype=np.float64).reshape(-1)
    if forward is None:
        forward = render(gset, cam, tau_arr, background, tile_size)
    elif forward.fingerprint != _fingerprint(gset, cam, tau_arr, background):
        raise ContractViolation("backward inputs differ from those of the supplied forward render")
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != forward.image.shape:
        raise ShapeError(f"d_image shape {d_image.shape} != image shape {forward.image.shape}")

    s = forward.splats
    bins = forward.bins
    g_entry = np.zeros((bins.entries.shape[0], 9))
    per_prim = np.zeros((P, 9))
    if P and bins.entries.shape[0]:
        _kernels.composite_backward(
            bins.ranges, bins.entries, np.ascontiguousarray(s.means2d), np.ascontiguousarray(s.conics),
            np.ascontiguousarray(s.colors), np.ascontiguousarray(s.effective_opacity),
            cam.width, cam.height, bins.tile_size, background, forward.transmittance,
            forward.last_entry, d_image, g_entry)
        _kernels.reduce_entries(bins.entries, g_entry, P, per_prim)

    d_color = per_prim[:, 0:3] * (s.colors_raw > 0.0)
    basis = sh_basis(s.view_dirs, gset.sh_degree)
    d_sh = basis[:, :, None] * d_color[:, None, :]
    d_eff = per_prim[:, 3]
    d_logit = d_eff * s.tau * s.opacities * (1.0 - s.opacities)
    d_tau = d_eff * s.opacities
    d_means2d = per_prim[:, 4:6]
    grads = SplatGradients(d_sh=d_sh, d_opacity_logit=d_logit, d_tau=d_tau, d_means2d=d_means2d)
    if not geometry:
        return grads

    # conic = inv(cov2d): dL/dcov2d = -K dL/dK K with the off-diagonal split across both entries.
    Gk = np.empty((P, 2, 2))
    Gk[:, 0, 0] = per_prim[:, 6]
    Gk[:, 0, 1] = Gk[:, 1, 0] = 0.5 * per_prim[:, 7]
    Gk[:, 1, 1] = per_prim[:, 8]
    K = np.empty((P, 2, 2))
    K[:, 0, 0] = s.conics[:, 0]
    K[:, 0, 1] = K[:, 1, 0] = s.conics[:, 1]
    K[:, 1, 1] = s.conics[:, 2]
    d_cov2d = -K @ Gk @ K
    d_cov2d[~s.valid] = 0.0
    d_means, d_cov3d = project_gaussians_vjp(s.projection, cam, d_means2d, d_cov2d)

    # Color direction depends on the mean as well.
    jac = sh_basis_jacobian(s.view_dirs, gset.sh_degree)
    d_dir = np.einsum("pkd,pkc,pc->pd", jac, gset.sh, d_color)
    d_dir -= s.view_dirs * np.sum(s.view_dirs * d_dir, axis=1, keepdims=True)
    d_means = d_means + d_dir / s.view_dist[:, None]

    d_quats, d_log_scales = covariance_vjp(gset.quats, gset.log_scales, d_cov3d)
    grads.d_means = d_means
    grads.d_quats = d_quats
    grads.d_log_scales = d_log_scales
    return grads


def render_fused_backward(scene, cam, tau, d_image, forward=None, geometry=False,
                          background=(0.0, 0.0, 0.0), tile_size=DEFAULT_TILE_SIZE):
    """Reverse pass of :func:`render_fused`; gradients follow concatenation order."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    if tau.shape[0] != len(scene):
        raise ShapeError(f"tau has {tau.shape[0]} entries, scene has {len(scene)} primitives")
    return render_backward(concat_modalities(scene), cam, d_image, tau, forward, geometry, background, tile_size)
