"""Tile-binned alpha compositing kernels.

The image is split into 16x16 tiles; each tile holds the front-to-back list
of splats whose 3-sigma rectangle intersects it. Forward walks every pixel's
list accumulating C = sum_i T_i a'_i c_i with T the running transmittance;
backward re-walks the same list using the stored final pixel color, so no
per-pixel intermediates are kept.

Kernels run single-threaded in a fixed loop order, which makes forward and
backward strictly deterministic. Early termination, the alpha clamp and the
rectangle containment test are shared verbatim with the brute-force
reference compositor so both paths see the identical term set.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

TILE = 16
ALPHA_CLAMP = 0.999
TRANSMITTANCE_MIN = 1e-4


@njit(cache=True)
def _splat_tile_range(u, v, rx, ry, width, height, ntx, nty):
    """Inclusive tile bounds of a splat's pixel rectangle, or (1, 0, ...) sentinel."""
    x0 = int(np.ceil(u - rx))
    x1 = int(np.floor(u + rx))
    y0 = int(np.ceil(v - ry))
    y1 = int(np.floor(v + ry))
    x0 = max(x0, 0)
    y0 = max(y0, 0)
    x1 = min(x1, width - 1)
    y1 = min(y1, height - 1)
    if x0 > x1 or y0 > y1:
        return 1, 0, 1, 0
    return x0 // TILE, x1 // TILE, y0 // TILE, y1 // TILE


@njit(cache=True)
def bin_splats(means2d, radii, order, width, height):
    """Build per-tile CSR splat lists, each in global front-to-back order.

    Returns (tile_ptr (ntiles+1,), tile_ids (total,)): splat rows for tile t
    are tile_ids[tile_ptr[t]:tile_ptr[t+1]], tiles indexed ty * ntx + tx.
    """
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    ntiles = ntx * nty
    counts = np.zeros(ntiles, dtype=np.int64)
    for k in range(order.shape[0]):
        s = order[k]
        tx0, tx1, ty0, ty1 = _splat_tile_range(
            means2d[s, 0], means2d[s, 1], radii[s, 0], radii[s, 1],
            width, height, ntx, nty)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx] += 1
    tile_ptr = np.zeros(ntiles + 1, dtype=np.int64)
    for t in range(ntiles):
        tile_ptr[t + 1] = tile_ptr[t] + counts[t]
    tile_ids = np.empty(tile_ptr[ntiles], dtype=np.int64)
    cursor = tile_ptr[:ntiles].copy()
    for k in range(order.shape[0]):
        s = order[k]
        tx0, tx1, ty0, ty1 = _splat_tile_range(
            means2d[s, 0], means2d[s, 1], radii[s, 0], radii[s, 1],
            width, height, ntx, nty)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * ntx + tx
                tile_ids[cursor[t]] = s
                cursor[t] += 1
    return tile_ptr, tile_ids


@njit(cache=True)
def composite_forward(means2d, conics, radii, alphas, colors,
                      tile_ptr, tile_ids, width, height, background,
                      out_image, out_alpha):
    ntx = (width + TILE - 1) // TILE
    ntiles = tile_ptr.shape[0] - 1
    for t in range(ntiles):
        tx = t % ntx
        ty = t // ntx
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for k in range(tile_ptr[t], tile_ptr[t + 1]):
                    if T < TRANSMITTANCE_MIN:
                        break
                    s = tile_ids[k]
                    dx = px - means2d[s, 0]
                    dy = py - means2d[s, 1]
                    if abs(dx) > radii[s, 0] or abs(dy) > radii[s, 1]:
                        continue
                    q = -0.5 * (conics[s, 0] * dx * dx
                                + 2.0 * conics[s, 1] * dx * dy
                                + conics[s, 2] * dy * dy)
                    ap = alphas[s] * math.exp(q)
                    if ap > ALPHA_CLAMP:
                        ap = ALPHA_CLAMP
                    r += T * ap * colors[s, 0]
                    g += T * ap * colors[s, 1]
                    b += T * ap * colors[s, 2]
                    T *= 1.0 - ap
                out_image[py, px, 0] = r + T * background[0]
                out_image[py, px, 1] = g + T * background[1]
                out_image[py, px, 2] = b + T * background[2]
                out_alpha[py, px] = 1.0 - T


@njit(cache=True)
def composite_backward(means2d, conics, radii, alphas, colors,
                       tile_ptr, tile_ids, width, height,
                       final_image, dL_dimage,
                       g_means2d, g_conics, g_alphas, g_colors, touched):
    """Re-walk each pixel's splat list, distributing the image gradient.

    For splat i at one pixel, with prefix the color accumulated through i,
    dC/da'_i = T_i c_i - (C - prefix_i) / (1 - a'_i); the second term covers
    every later splat and the background, both attenuated by (1 - a'_i).
    Gradients stop at the alpha clamp. The depth ordering is treated as
    constant.
    """
    ntx = (width + TILE - 1) // TILE
    ntiles = tile_ptr.shape[0] - 1
    for t in range(ntiles):
        tx = t % ntx
        ty = t // ntx
        for py in range(ty * TILE, min(ty * TILE + TILE, height)):
            for px in range(tx * TILE, min(tx * TILE + TILE, width)):
                gr = dL_dimage[py, px, 0]
                gg = dL_dimage[py, px, 1]
                gb = dL_dimage[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                cr = final_image[py, px, 0]
                cg = final_image[py, px, 1]
                cb = final_image[py, px, 2]
                T = 1.0
                pr = 0.0
                pg = 0.0
                pb = 0.0
                for k in range(tile_ptr[t], tile_ptr[t + 1]):
                    if T < TRANSMITTANCE_MIN:
                        break
                    s = tile_ids[k]
                    dx = px - means2d[s, 0]
                    dy = py - means2d[s, 1]
                    if abs(dx) > radii[s, 0] or abs(dy) > radii[s, 1]:
                        continue
                    a = conics[s, 0]
                    bq = conics[s, 1]
                    c = conics[s, 2]
                    q = -0.5 * (a * dx * dx + 2.0 * bq * dx * dy
                                + c * dy * dy)
                    eq = math.exp(q)
                    raw = alphas[s] * eq
                    ap = raw if raw <= ALPHA_CLAMP else ALPHA_CLAMP
                    w = T * ap
                    pr += w * colors[s, 0]
                    pg += w * colors[s, 1]
                    pb += w * colors[s, 2]
                    om = 1.0 - ap
                    g_ap = (gr * (T * colors[s, 0] - (cr - pr) / om)
                            + gg * (T * colors[s, 1] - (cg - pg) / om)
                            + gb * (T * colors[s, 2] - (cb - pb) / om))
                    g_colors[s, 0] += w * gr
                    g_colors[s, 1] += w * gg
                    g_colors[s, 2] += w * gb
                    touched[s] = True
                    if raw <= ALPHA_CLAMP:
                        g_alphas[s] += g_ap * eq
                        gq = g_ap * ap
                        g_means2d[s, 0] += gq * (a * dx + bq * dy)
                        g_means2d[s, 1] += gq * (bq * dx + c * dy)
                        g_conics[s, 0] += gq * (-0.5 * dx * dx)
                        g_conics[s, 1] += gq * (-dx * dy)
                        g_conics[s, 2] += gq * (-0.5 * dy * dy)
                    T *= om
