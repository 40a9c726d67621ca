"""Brute-force renderer used as an oracle for the tiled rasterizer.

Loops over every depth-sorted primitive and updates the whole image at
once. No tiling and no footprint culling: every primitive is tested at
every pixel.
"""

import hashlib

import numpy as np

from .rasterizer import ALPHA_MAX, ALPHA_MIN, T_MIN, prepare_splats


def render_reference(gset, cam, tau=None, background=(0.0, 0.0, 0.0), return_weights=False):
    """Naive per-pixel composite; returns ``(image, transmittance[, weight_sum])``."""
    s = prepare_splats(gset, cam, tau)
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    C = np.zeros((H, W, 3))
    wsum = np.zeros((H, W))
    done = np.zeros((H, W), dtype=bool)
    for i in s.order:
        dx = s.means2d[i, 0] - xs
        dy = s.means2d[i, 1] - ys
        a, b, c = s.conics[i]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(ALPHA_MAX, s.effective_opacity[i] * np.exp(power))
        live = (power <= 0.0) & (alpha >= ALPHA_MIN) & ~done
        test_T = T * (1.0 - alpha)
        stop = live & (test_T < T_MIN)
        done |= stop
        live &= ~stop
        w = np.where(live, alpha * T, 0.0)
        C += w[..., None] * s.colors[i]
        wsum += w
        T = np.where(live, test_T, T)
    image = C + T[..., None] * np.asarray(background, dtype=np.float64)
    if return_weights:
        return image, T, wsum
    return image, T


def composite_state(gset, cam, tau=None):
    """Digest of every discrete decision made while compositing.

    Covers depth order, per-pixel live/clamped/stopped masks, color clamping
    and projection guards. The rendered image is smooth in the parameters
    wherever this digest is locally constant, so finite-difference checks use
    it to skip perturbations that cross a threshold.
    """
    s = prepare_splats(gset, cam, tau)
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    done = np.zeros((H, W), dtype=bool)
    h = hashlib.sha1()
    h.update(s.order.tobytes())
    h.update(s.valid.tobytes())
    h.update((s.colors_raw > 0.0).tobytes())
    h.update(np.asarray(s.projection.clamp_x).tobytes())
    h.update(np.asarray(s.projection.clamp_y).tobytes())
    for i in s.order:
        dx = s.means2d[i, 0] - xs
        dy = s.means2d[i, 1] - ys
        a, b, c = s.conics[i]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        raw = s.effective_opacity[i] * np.exp(power)
        alpha = np.minimum(ALPHA_MAX, raw)
        live = (power <= 0.0) & (alpha >= ALPHA_MIN) & ~done
        test_T = T * (1.0 - alpha)
        stop = live & (test_T < T_MIN)
        done |= stop
        live &= ~stop
        T = np.where(live, test_T, T)
        h.update(np.packbits(live).tobytes())
        h.update(np.packbits(live & (raw > ALPHA_MAX)).tobytes())
    h.update(np.packbits(done).tobytes())
    return h.hexdigest()
