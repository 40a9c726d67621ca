"""Numba kernels for tile binning and per-pixel compositing.

All kernels work in float64. Per-tile work runs under ``prange``; gradient
buffers are indexed by tile-list entry so no two threads write the same
slot, and the per-primitive reduction runs sequentially in entry order,
which keeps results independent of the thread count.
"""

import math

import numba
import numpy as np
from numba import njit, prange

# The bundled TBB is too old for numba; fall back to OpenMP quietly.
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4


@njit(cache=True)
def bin_tiles(order, means2d, extents, width, height, tile_size):
    """Return ``(ranges, entries)`` tile lists.

    ``order`` holds primitive ids sorted front to back; ``extents`` the
    half-widths (ex, ey) in pixels of each primitive's axis-aligned
    footprint, negative for primitives that never contribute.
    """
    n_tx = (width + tile_size - 1) // tile_size
    n_ty = (height + tile_size - 1) // tile_size
    n_tiles = n_tx * n_ty
    rects = np.full((order.shape[0], 4), -1, dtype=np.int64)
    counts = np.zeros(n_tiles, dtype=np.int64)
    for r in range(order.shape[0]):
        i = order[r]
        ex = extents[i, 0]
        ey = extents[i, 1]
        if ex < 0.0:
            continue
        x0 = math.ceil(means2d[i, 0] - ex)
        x1 = math.floor(means2d[i, 0] + ex)
        y0 = math.ceil(means2d[i, 1] - ey)
        y1 = math.floor(means2d[i, 1] + ey)
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width - 1:
            x1 = width - 1
        if y1 > height - 1:
            y1 = height - 1
        if x0 > x1 or y0 > y1:
            continue
        tx0 = x0 // tile_size
        tx1 = x1 // tile_size
        ty0 = y0 // tile_size
        ty1 = y1 // tile_size
        rects[r, 0] = tx0
        rects[r, 1] = tx1
        rects[r, 2] = ty0
        rects[r, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tx + tx] += 1
    ranges = np.zeros((n_tiles, 2), dtype=np.int64)
    total = 0
    for t in range(n_tiles):
        ranges[t, 0] = total
        total += counts[t]
        ranges[t, 1] = total
    entries = np.empty(total, dtype=np.int64)
    fill = ranges[:, 0].copy()
    for r in range(order.shape[0]):
        if rects[r, 0] < 0:
            continue
        for ty in range(rects[r, 2], rects[r, 3] + 1):
            for tx in range(rects[r, 0], rects[r, 1] + 1):
                t = ty * n_tx + tx
                entries[fill[t]] = order[r]
                fill[t] += 1
    return ranges, entries


@njit(parallel=True, cache=True)
def composite_forward(ranges, entries, means2d, conics, colors, opac, width, height,
                      tile_size, background, image, trans, last, count):
    n_tx = (width + tile_size - 1) // tile_size
    n_tiles = ranges.shape[0]
    for t in prange(n_tiles):
        start = ranges[t, 0]
        end = ranges[t, 1]
        ty0 = (t // n_tx) * tile_size
        tx0 = (t % n_tx) * tile_size
        for py in range(ty0, min(ty0 + tile_size, height)):
            for px in range(tx0, min(tx0 + tile_size, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                n_last = 0
                n = 0
                for e in range(start, end):
                    i = entries[e]
                    dx = means2d[i, 0] - px
                    dy = means2d[i, 1] - py
                    power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = min(ALPHA_MAX, opac[i] * math.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    w = alpha * T
                    c0 += colors[i, 0] * w
                    c1 += colors[i, 1] * w
                    c2 += colors[i, 2] * w
                    T = test_T
                    n_last = e - start + 1
                    n += 1
                image[py, px, 0] = c0 + T * background[0]
                image[py, px, 1] = c1 + T * background[1]
                image[py, px, 2] = c2 + T * background[2]
                trans[py, px] = T
                last[py, px] = n_last
                count[py, px] = n


@njit(parallel=True, cache=True)
def composite_weights(ranges, entries, means2d, conics, opac, width, height, tile_size, weight_sum):
    """Per-pixel sum of compositing weights (used for partition-of-unity checks)."""
    n_tx = (width + tile_size - 1) // tile_size
    for t in prange(ranges.shape[0]):
        ty0 = (t // n_tx) * tile_size
        tx0 = (t % n_tx) * tile_size
        for py in range(ty0, min(ty0 + tile_size, height)):
            for px in range(tx0, min(tx0 + tile_size, width)):
                T = 1.0
                s = 0.0
                for e in range(ranges[t, 0], ranges[t, 1]):
                    i = entries[e]
                    dx = means2d[i, 0] - px
                    dy = means2d[i, 1] - py
                    power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = min(ALPHA_MAX, opac[i] * math.exp(power))
                    if alpha < ALPHA_MIN:
                        continue
                    test_T = T * (1.0 - alpha)
                    if test_T < T_MIN:
                        break
                    s += alpha * T
                    T = test_T
                weight_sum[py, px] = s


@njit(parallel=True, cache=True)
def composite_backward(ranges, entries, means2d, conics, colors, opac, width, height,
                       tile_size, background, trans, last, d_image, g_entry):
    """Reverse pass; writes per-entry gradients into ``g_entry`` (E, 9).

    Columns: d_color (3), d_opacity (1), d_mean2d (2), d_conic (3).
    """
    n_tx = (width + tile_size - 1) // tile_size
    for t in prange(ranges.shape[0]):
        start = ranges[t, 0]
        ty0 = (t // n_tx) * tile_size
        tx0 = (t % n_tx) * tile_size
        for py in range(ty0, min(ty0 + tile_size, height)):
            for px in range(tx0, min(tx0 + tile_size, width)):
                d0 = d_image[py, px, 0]
                d1 = d_image[py, px, 1]
                d2 = d_image[py, px, 2]
                if d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
                    continue
                T_final = trans[py, px]
                T = T_final
                bg_dot = background[0] * d0 + background[1] * d1 + background[2] * d2
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                last_alpha = 0.0
                lc0 = 0.0
                lc1 = 0.0
                lc2 = 0.0
                for e in range(start + last[py, px] - 1, start - 1, -1):
                    i = entries[e]
                    dx = means2d[i, 0] - px
                    dy = means2d[i, 1] - py
                    a = conics[i, 0]
                    b = conics[i, 1]
                    c = conics[i, 2]
                    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                    if power > 0.0:
                        continue
                    G = math.exp(power)
                    raw_alpha = opac[i] * G
                    alpha = min(ALPHA_MAX, raw_alpha)
                    if alpha < ALPHA_MIN:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    g_entry[e, 0] += w * d0
                    g_entry[e, 1] += w * d1
                    g_entry[e, 2] += w * d2
                    acc0 = last_alpha * lc0 + (1.0 - last_alpha) * acc0
                    acc1 = last_alpha * lc1 + (1.0 - last_alpha) * acc1
                    acc2 = last_alpha * lc2 + (1.0 - last_alpha) * acc2
                    lc0 = colors[i, 0]
                    lc1 = colors[i, 1]
                    lc2 = colors[i, 2]
                    dL_dalpha = ((lc0 - acc0) * d0 + (lc1 - acc1) * d1 + (lc2 - acc2) * d2) * T
                    dL_dalpha += -T_final / (1.0 - alpha) * bg_dot
                    last_alpha = alpha
                    if raw_alpha > ALPHA_MAX:
                        continue
                    g_entry[e, 3] += G * dL_dalpha
                    dL_dpower = opac[i] * G * dL_dalpha
                    g_entry[e, 4] += -dL_dpower * (a * dx + b * dy)
                    g_entry[e, 5] += -dL_dpower * (b * dx + c * dy)
                    g_entry[e, 6] += -0.5 * dL_dpower * dx * dx
                    g_entry[e, 7] += -dL_dpower * dx * dy
                    g_entry[e, 8] += -0.5 * dL_dpower * dy * dy


@njit(cache=True)
def reduce_entries(entries, g_entry, n_prims, out):
    for e in range(entries.shape[0]):
        i = entries[e]
        for k in range(g_entry.shape[1]):
            out[i, k] += g_entry[e, k]
