"""Pure-numpy tile rasterizer, vectorized over (pixels in tile) x (Gaussians in tile)."""

import numpy as np


def bin_gaussians(order, rect, n_tiles_x, n_tiles_y):
    r = rect[order]
    on = r[:, 0] >= 0
    order, r = order[on], r[on]
    lists = []
    counts = [0]
    for ty in range(n_tiles_y):
        in_row = (r[:, 2] <= ty) & (ty <= r[:, 3])
        for tx in range(n_tiles_x):
            sel = order[in_row & (r[:, 0] <= tx) & (tx <= r[:, 1])]
            lists.append(sel)
            counts.append(sel.size)
    offsets = np.cumsum(np.asarray(counts, dtype=np.int64))
    flat = np.concatenate(lists).astype(np.int64) if offsets[-1] else np.empty(0, dtype=np.int64)
    return offsets, flat


def _tile_pixels(tx, ty, tile, width, height):
    u = np.arange(tx * tile, min((tx + 1) * tile, width))
    v = np.arange(ty * tile, min((ty + 1) * tile, height))
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return vv.ravel(), uu.ravel()


def _tile_alpha(ids, uu, vv, mean2d, conic, opacity, alpha_max, alpha_skip, t_stop):
    dx = uu[:, None] - mean2d[ids, 0][None, :]
    dy = vv[:, None] - mean2d[ids, 1][None, :]
    a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gauss = np.exp(power)
    raw = opacity[ids] * gauss
    alpha = np.minimum(raw, alpha_max)
    alpha = np.where(alpha < alpha_skip, 0.0, alpha)
    one_m = 1.0 - alpha
    t_after = np.cumprod(one_m, axis=1)
    t_before = np.empty_like(t_after)
    t_before[:, 0] = 1.0
    t_before[:, 1:] = t_after[:, :-1]
    stopped = np.cumsum((alpha > 0) & (t_after < t_stop), axis=1) > 0
    use = (alpha > 0) & ~stopped
    alpha = np.where(use, alpha, 0.0)
    return dx, dy, gauss, raw, alpha, t_before, use


def raster_forward(mean2d, conic, opacity, color, offsets, lists, width, height, tile,
                   bg, alpha_max, alpha_skip, t_stop):
    n_tiles_x = (width + tile - 1) // tile
    n_tiles_y = (height + tile - 1) // tile
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t_idx = ty * n_tiles_x + tx
            ids = lists[offsets[t_idx]:offsets[t_idx + 1]]
            vv, uu = _tile_pixels(tx, ty, tile, width, height)
            if ids.size == 0:
                image[vv, uu] = bg
                final_t[vv, uu] = 1.0
                continue
            _, _, _, _, alpha, t_before, use = _tile_alpha(ids, uu, vv, mean2d, conic, opacity,
                                                           alpha_max, alpha_skip, t_stop)
            w = alpha * t_before
            t_end = np.prod(np.where(use, 1.0 - alpha, 1.0), axis=1)
            image[vv, uu] = w @ color[ids] + t_end[:, None] * bg
            final_t[vv, uu] = t_end
            last = np.where(use.any(axis=1), ids.size - np.argmax(use[:, ::-1], axis=1), 0)
            n_contrib[vv, uu] = last
    return image, final_t, n_contrib


def raster_backward(mean2d, conic, opacity, color, offsets, lists, width, height, tile,
                    bg, alpha_max, alpha_skip, final_t, n_contrib, grad_image, t_stop=1e-4):
    n = mean2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_color = np.zeros((n, 3))
    n_tiles_x = (width + tile - 1) // tile
    n_tiles_y = (height + tile - 1) // tile
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t_idx = ty * n_tiles_x + tx
            ids = lists[offsets[t_idx]:offsets[t_idx + 1]]
            if ids.size == 0:
                continue
            vv, uu = _tile_pixels(tx, ty, tile, width, height)
            gC = grad_image[vv, uu]
            if not np.any(gC):
                continue
            dx, dy, gauss, raw, alpha, t_before, use = _tile_alpha(ids, uu, vv, mean2d, conic, opacity,
                                                                   alpha_max, alpha_skip, t_stop)
            w = alpha * t_before
            t_end = final_t[vv, uu]
            g_color[ids] += w.T @ gC
            contrib = w * (gC @ color[ids].T)  # per (pixel, g): gC . c_g * w
            after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
            bgt = t_end * (gC @ bg)
            one_m = 1.0 - alpha
            dl_da = (gC @ color[ids].T) * t_before - (after + bgt[:, None]) / one_m
            live = use & (raw <= alpha_max)
            dl_da = np.where(live, dl_da, 0.0)
            np.add.at(g_opacity, ids, (dl_da * gauss).sum(axis=0))
            dl_dp = dl_da * raw
            a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
            gm = np.stack([(dl_dp * (a * dx + b * dy)).sum(axis=0), (dl_dp * (b * dx + c * dy)).sum(axis=0)], axis=1)
            gk = np.stack([(-0.5 * dl_dp * dx * dx).sum(axis=0), (-dl_dp * dx * dy).sum(axis=0),
                           (-0.5 * dl_dp * dy * dy).sum(axis=0)], axis=1)
            np.add.at(g_mean, ids, gm)
            np.add.at(g_conic, ids, gk)
    return g_mean, g_conic, g_opacity, g_color
