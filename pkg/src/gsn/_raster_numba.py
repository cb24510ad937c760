"""Tile rasterizer kernels compiled with numba.

Same math as :mod:`gsn._raster_numpy`; the two are cross-checked in tests.
Pixel (u, v) samples the image plane at integer coordinates (u, v).
"""

import math

import numpy as np

from ._accel import njit


@njit(cache=True)
def bin_gaussians(order, rect, n_tiles_x, n_tiles_y):
    """Depth-ordered per-tile lists. rect[g] = (tx0, tx1, ty0, ty1) inclusive, tx0 < 0 means offscreen."""
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        if rect[g, 0] < 0:
            continue
        for ty in range(rect[g, 2], rect[g, 3] + 1):
            for tx in range(rect[g, 0], rect[g, 1] + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        if rect[g, 0] < 0:
            continue
        for ty in range(rect[g, 2], rect[g, 3] + 1):
            for tx in range(rect[g, 0], rect[g, 1] + 1):
                t = ty * n_tiles_x + tx
                lists[fill[t]] = g
                fill[t] += 1
    return offsets, lists


@njit(cache=True)
def _cutoffs(opacity, alpha_skip):
    """Exponent below which opacity*exp(power) is surely < alpha_skip (with margin)."""
    out = np.empty(opacity.shape[0], dtype=np.float64)
    for g in range(opacity.shape[0]):
        if opacity[g] > 0.0:
            out[g] = math.log(alpha_skip / opacity[g]) - 1e-6
        else:
            out[g] = np.inf
    return out


@njit(cache=True)
def raster_forward(mean2d, conic, opacity, color, offsets, lists, width, height, tile,
                   bg, alpha_max, alpha_skip, t_stop):
    cutoff = _cutoffs(opacity, alpha_skip)
    n_tiles_x = (width + tile - 1) // tile
    image = np.empty((height, width, 3), dtype=np.float64)
    final_t = np.empty((height, width), dtype=np.float64)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for v in range(height):
        ty = v // tile
        for u in range(width):
            t_idx = ty * n_tiles_x + u // tile
            start = offsets[t_idx]
            end = offsets[t_idx + 1]
            T = 1.0
            r = 0.0
            gr = 0.0
            b = 0.0
            last = 0
            for k in range(start, end):
                g = lists[k]
                dx = u - mean2d[g, 0]
                dy = v - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                if power < cutoff[g]:
                    continue
                alpha = opacity[g] * math.exp(power)
                if alpha > alpha_max:
                    alpha = alpha_max
                if alpha < alpha_skip:
                    continue
                test_t = T * (1.0 - alpha)
                if test_t < t_stop:
                    break
                w = alpha * T
                r += color[g, 0] * w
                gr += color[g, 1] * w
                b += color[g, 2] * w
                T = test_t
                last = k - start + 1
            image[v, u, 0] = r + T * bg[0]
            image[v, u, 1] = gr + T * bg[1]
            image[v, u, 2] = b + T * bg[2]
            final_t[v, u] = T
            n_contrib[v, u] = last
    return image, final_t, n_contrib


@njit(cache=True)
def raster_backward(mean2d, conic, opacity, color, offsets, lists, width, height, tile,
                    bg, alpha_max, alpha_skip, final_t, n_contrib, grad_image):
    """Back-to-front pass recomputing transmittance from the stored final value."""
    n = mean2d.shape[0]
    g_mean = np.zeros((n, 2), dtype=np.float64)
    g_conic = np.zeros((n, 3), dtype=np.float64)
    g_opacity = np.zeros(n, dtype=np.float64)
    g_color = np.zeros((n, 3), dtype=np.float64)
    cutoff = _cutoffs(opacity, alpha_skip)
    n_tiles_x = (width + tile - 1) // tile
    for v in range(height):
        ty = v // tile
        for u in range(width):
            gc0 = grad_image[v, u, 0]
            gc1 = grad_image[v, u, 1]
            gc2 = grad_image[v, u, 2]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0:
                continue
            t_idx = ty * n_tiles_x + u // tile
            start = offsets[t_idx]
            T_end = final_t[v, u]
            T = T_end
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            bgt = gc0 * bg[0] * T_end + gc1 * bg[1] * T_end + gc2 * bg[2] * T_end
            for k in range(start + n_contrib[v, u] - 1, start - 1, -1):
                g = lists[k]
                dx = u - mean2d[g, 0]
                dy = v - mean2d[g, 1]
                a = conic[g, 0]
                bb = conic[g, 1]
                c = conic[g, 2]
                power = -0.5 * (a * dx * dx + c * dy * dy) - bb * dx * dy
                if power < cutoff[g]:
                    continue
                gauss = math.exp(power)
                raw = opacity[g] * gauss
                alpha = raw
                clamped = False
                if alpha > alpha_max:
                    alpha = alpha_max
                    clamped = True
                if alpha < alpha_skip:
                    continue
                one_m = 1.0 - alpha
                T = T / one_m
                w = alpha * T
                g_color[g, 0] += gc0 * w
                g_color[g, 1] += gc1 * w
                g_color[g, 2] += gc2 * w
                # dL/dalpha = sum_ch gC (c T - (S_after + T_end bg) / (1 - alpha))
                dl_da = (gc0 * color[g, 0] + gc1 * color[g, 1] + gc2 * color[g, 2]) * T
                dl_da -= (gc0 * s0 + gc1 * s1 + gc2 * s2 + bgt) / one_m
                s0 += color[g, 0] * w
                s1 += color[g, 1] * w
                s2 += color[g, 2] * w
                if clamped:
                    continue
                g_opacity[g] += dl_da * gauss
                dl_dp = dl_da * raw
                g_mean[g, 0] += dl_dp * (a * dx + bb * dy)
                g_mean[g, 1] += dl_dp * (bb * dx + c * dy)
                g_conic[g, 0] += -0.5 * dl_dp * dx * dx
                g_conic[g, 1] += -dl_dp * dx * dy
                g_conic[g, 2] += -0.5 * dl_dp * dy * dy
    return g_mean, g_conic, g_opacity, g_color
