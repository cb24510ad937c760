"""Differentiable Gaussian splat rasterizer.

Forward: EWA projection of every Gaussian, depth sort (stable by index),
16x16 tile binning and front-to-back alpha compositing. Backward: analytic
gradients to means, scales, quaternions, colors and opacities.
:func:`render_reference` is the untiled oracle the tiled path is tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _raster_numpy
from ._accel import USE_NUMBA
from .autodiff import Tensor, custom_op
from .errors import ShapeError
from .splat import Camera, GaussianSplat, quat_to_rotmat

if USE_NUMBA:
    from . import _raster_numba as _kernels
else:
    _kernels = _raster_numpy


@dataclass(frozen=True)
class RenderConfig:
    dilation: float = 0.3
    alpha_max: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    t_stop: float = 1e-4
    z_near: float = 0.01
    tile: int = 16


DEFAULT_CONFIG = RenderConfig()


@dataclass
class RenderStats:
    n_gaussians: int = 0
    culled: int = 0
    degenerate: int = 0
    offscreen: int = 0


@dataclass
class Projected:
    """Per-Gaussian screen-space quantities plus what backward needs."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    valid: np.ndarray
    t: np.ndarray
    J: np.ndarray
    rotmat: np.ndarray
    sigma: np.ndarray
    culled: np.ndarray
    degenerate: np.ndarray


@dataclass(frozen=True)
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius: float


def _as64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def project(mu, scale, rot, cam: Camera, cfg: RenderConfig = DEFAULT_CONFIG) -> Projected:
    mu, scale, rot = _as64(mu), _as64(scale), _as64(rot)
    W = cam.R
    t = (mu - cam.position) @ W.T
    tz = t[:, 2]
    culled = ~(tz > cfg.z_near)
    tz_safe = np.where(culled, 1.0, tz)
    n = mu.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz_safe
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz_safe**2
    J[:, 1, 1] = cam.fy / tz_safe
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz_safe**2
    rotmat = quat_to_rotmat(rot)
    sigma = (rotmat * (scale**2)[:, None, :]) @ np.swapaxes(rotmat, 1, 2)
    M = J @ W
    cov2d = M @ sigma @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += cfg.dilation
    cov2d[:, 1, 1] += cfg.dilation
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    degenerate = ~culled & ~(det > 0)
    valid = ~culled & ~degenerate
    det_safe = np.where(valid, det, 1.0)
    conic = np.stack([C / det_safe, -B / det_safe, A / det_safe], axis=1)
    mid = 0.5 * (A + C)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    mean2d = np.stack([cam.fx * t[:, 0] / tz_safe + cam.cx, cam.fy * t[:, 1] / tz_safe + cam.cy], axis=1)
    return Projected(mean2d, cov2d, conic, tz, radius, valid, t, J, rotmat, sigma, culled, degenerate)


def project_gaussian(G, cam: Camera, cfg: RenderConfig = DEFAULT_CONFIG) -> Projected2D | None:
    """Project one primitive; returns None when it is culled or degenerate."""
    p = project(np.asarray(G.mu)[None], np.asarray(G.scale)[None], np.asarray(G.rot)[None], cam, cfg)
    if not p.valid[0]:
        return None
    return Projected2D(p.mean2d[0], p.cov2d[0], float(p.depth[0]), float(p.radius[0]))


def _tile_rects(proj: Projected, opacity: np.ndarray, cam: Camera, cfg: RenderConfig) -> np.ndarray:
    """Inclusive tile ranges of the region where a Gaussian can pass the alpha_skip test.

    The contribution drops below alpha_skip outside the ellipse
    d^T cov^-1 d = 2 ln(alpha/alpha_skip), whose bounding box has half-widths
    sqrt(2 ln(alpha/alpha_skip) * cov_xx) and likewise for y. Binning by that
    box is exact, not an approximation.
    """
    n = opacity.shape[0]
    rect = np.full((n, 4), -1, dtype=np.int64)
    ratio = np.where(proj.valid, opacity, 0.0) / cfg.alpha_skip
    live = proj.valid & (ratio >= 1.0)
    level = 2.0 * np.log(np.maximum(ratio, 1.0))
    rx = np.sqrt(level * np.maximum(proj.cov2d[:, 0, 0], 0.0)) * (1 + 1e-6) + 1e-6
    ry = np.sqrt(level * np.maximum(proj.cov2d[:, 1, 1], 0.0)) * (1 + 1e-6) + 1e-6
    x0 = np.ceil(proj.mean2d[:, 0] - rx)
    x1 = np.floor(proj.mean2d[:, 0] + rx)
    y0 = np.ceil(proj.mean2d[:, 1] - ry)
    y1 = np.floor(proj.mean2d[:, 1] + ry)
    on = live & (x1 >= 0) & (x0 <= cam.width - 1) & (y1 >= 0) & (y0 <= cam.height - 1)
    on &= np.isfinite(x0) & np.isfinite(x1) & np.isfinite(y0) & np.isfinite(y1)
    tile = cfg.tile
    ntx = (cam.width + tile - 1) // tile
    nty = (cam.height + tile - 1) // tile
    rect[on, 0] = np.clip(x0[on], 0, cam.width - 1).astype(np.int64) // tile
    rect[on, 1] = np.clip(x1[on], 0, cam.width - 1).astype(np.int64) // tile
    rect[on, 2] = np.clip(y0[on], 0, cam.height - 1).astype(np.int64) // tile
    rect[on, 3] = np.clip(y1[on], 0, cam.height - 1).astype(np.int64) // tile
    np.clip(rect[on, 1], 0, ntx - 1, out=rect[on, 1])
    np.clip(rect[on, 3], 0, nty - 1, out=rect[on, 3])
    return rect


def depth_order(proj: Projected) -> np.ndarray:
    idx = np.flatnonzero(proj.valid)
    return idx[np.argsort(proj.depth[idx], kind="stable")].astype(np.int64)


@dataclass
class RenderContext:
    """Forward state retained for the backward pass."""

    cam: Camera
    cfg: RenderConfig
    bg: np.ndarray
    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    proj: Projected
    offsets: np.ndarray
    lists: np.ndarray
    final_t: np.ndarray
    n_contrib: np.ndarray
    stats: RenderStats = field(default_factory=RenderStats)
    kernels: object = None


def rasterize(mu, scale, rot, color, opacity, cam: Camera, bg=(0.0, 0.0, 0.0),
              cfg: RenderConfig = DEFAULT_CONFIG, kernels=None) -> tuple[np.ndarray, RenderContext]:
    """Array-level forward. Returns a float64 (H, W, 3) image and the context."""
    kernels = kernels or _kernels
    mu, scale, rot, color = _as64(mu), _as64(scale), _as64(rot), _as64(color)
    opacity = _as64(opacity).reshape(-1)
    bg = _as64(bg).reshape(3)
    n = mu.shape[0]
    for name, a, d in (("mu", mu, 3), ("scale", scale, 3), ("rot", rot, 4), ("color", color, 3)):
        if a.shape != (n, d):
            raise ShapeError(f"{name} has shape {a.shape}, expected ({n}, {d})")
    if opacity.shape != (n,):
        raise ShapeError(f"opacity has shape {opacity.shape}, expected ({n},)")
    proj = project(mu, scale, rot, cam, cfg)
    rect = _tile_rects(proj, opacity, cam, cfg)
    order = depth_order(proj)
    tile = cfg.tile
    ntx = (cam.width + tile - 1) // tile
    nty = (cam.height + tile - 1) // tile
    offsets, lists = kernels.bin_gaussians(order, rect, ntx, nty)
    image, final_t, n_contrib = kernels.raster_forward(
        proj.mean2d, proj.conic, opacity, color, offsets, lists, cam.width, cam.height, tile,
        bg, cfg.alpha_max, cfg.alpha_skip, cfg.t_stop)
    stats = RenderStats(n, int(proj.culled.sum()), int(proj.degenerate.sum()),
                        int((proj.valid & (rect[:, 0] < 0)).sum()))
    ctx = RenderContext(cam, cfg, bg, mu, scale, rot, color, opacity, proj, offsets, lists,
                        final_t, n_contrib, stats, kernels)
    return image, ctx


def render(S: GaussianSplat, cam: Camera, bg=(0.0, 0.0, 0.0), cfg: RenderConfig = DEFAULT_CONFIG) -> np.ndarray:
    image, _ = rasterize(S.mu, S.scale, S.rot, S.color, S.opacity, cam, bg, cfg)
    return image


def render_with_stats(S: GaussianSplat, cam: Camera, bg=(0.0, 0.0, 0.0),
                      cfg: RenderConfig = DEFAULT_CONFIG) -> tuple[np.ndarray, RenderStats]:
    image, ctx = rasterize(S.mu, S.scale, S.rot, S.color, S.opacity, cam, bg, cfg)
    return image, ctx.stats


def render_reference(S: GaussianSplat, cam: Camera, bg=(0.0, 0.0, 0.0),
                     cfg: RenderConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Oracle: every pixel composites all depth-sorted Gaussians, no tiles, no radius cull."""
    proj = project(S.mu, S.scale, S.rot, cam, cfg)
    color = _as64(S.color)
    opacity = _as64(S.opacity)
    bg = _as64(bg).reshape(3)
    v, u = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64),
                       indexing="ij")
    T = np.ones((cam.height, cam.width))
    out = np.zeros((cam.height, cam.width, 3))
    active = np.ones((cam.height, cam.width), dtype=bool)
    for g in depth_order(proj):
        dx = u - proj.mean2d[g, 0]
        dy = v - proj.mean2d[g, 1]
        a, b, c = proj.conic[g]
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        alpha = np.minimum(opacity[g] * np.exp(power), cfg.alpha_max)
        hit = active & (alpha >= cfg.alpha_skip)
        test_t = T * (1.0 - alpha)
        stop = hit & (test_t < cfg.t_stop)
        active &= ~stop
        hit &= ~stop
        out += np.where(hit, alpha * T, 0.0)[..., None] * color[g]
        T = np.where(hit, test_t, T)
    return out + T[..., None] * bg


# ---------------------------------------------------------------------------
# backward


@dataclass
class SplatGrads:
    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    mean2d: np.ndarray | None = None


def _quat_grad(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. (w,x,y,z) of sum(G * quat_to_rotmat(q)), batched."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = lambda i, j: G[:, i, j]  # noqa: E731
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    gy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    gz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    return np.stack([gw, gx, gy, gz], axis=1)


def rasterize_backward(ctx: RenderContext, grad_image) -> SplatGrads:
    grad_image = _as64(grad_image)
    cam, cfg, proj = ctx.cam, ctx.cfg, ctx.proj
    if grad_image.shape != (cam.height, cam.width, 3):
        raise ShapeError(f"image gradient has shape {grad_image.shape}, expected {(cam.height, cam.width, 3)}")
    kernels = ctx.kernels or _kernels
    args = (proj.mean2d, proj.conic, ctx.opacity, ctx.color, ctx.offsets, ctx.lists, cam.width, cam.height,
            cfg.tile, ctx.bg, cfg.alpha_max, cfg.alpha_skip, ctx.final_t, ctx.n_contrib, grad_image)
    if kernels is _raster_numpy:
        g_mean, g_conic, g_opacity, g_color = kernels.raster_backward(*args, t_stop=cfg.t_stop)
    else:
        g_mean, g_conic, g_opacity, g_color = kernels.raster_backward(*args)

    valid = proj.valid
    # conic -> 2D covariance: dL/dSigma' = -K G_K K with G_K the symmetric-matrix gradient
    K = np.zeros_like(proj.cov2d)
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    GK = np.zeros_like(K)
    GK[:, 0, 0] = g_conic[:, 0]
    GK[:, 0, 1] = GK[:, 1, 0] = 0.5 * g_conic[:, 1]
    GK[:, 1, 1] = g_conic[:, 2]
    G2 = -K @ GK @ K
    W = cam.R
    M = proj.J @ W
    G_sigma = np.swapaxes(M, 1, 2) @ G2 @ M
    G_M = 2.0 * G2 @ M @ proj.sigma
    G_J = G_M @ W.T

    t = proj.t
    tz = np.where(valid, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros_like(t)
    g_t[:, 0] = G_J[:, 0, 2] * (-fx / tz**2) + g_mean[:, 0] * fx / tz
    g_t[:, 1] = G_J[:, 1, 2] * (-fy / tz**2) + g_mean[:, 1] * fy / tz
    g_t[:, 2] = (G_J[:, 0, 0] * (-fx / tz**2) + G_J[:, 0, 2] * (2 * fx * tx / tz**3)
                 + G_J[:, 1, 1] * (-fy / tz**2) + G_J[:, 1, 2] * (2 * fy * ty / tz**3)
                 - g_mean[:, 0] * fx * tx / tz**2 - g_mean[:, 1] * fy * ty / tz**2)
    g_mu = g_t @ W

    Rq = proj.rotmat
    s = ctx.scale
    proj_diag = np.einsum("nik,nij,njk->nk", Rq, G_sigma, Rq)
    g_scale = 2.0 * s * proj_diag
    G_R = 2.0 * G_sigma @ Rq * (s**2)[:, None, :]
    g_rot = _quat_grad(ctx.rot, G_R)

    mask = valid[:, None]
    return SplatGrads(
        mu=np.where(mask, g_mu, 0.0),
        scale=np.where(mask, g_scale, 0.0),
        rot=np.where(mask, g_rot, 0.0),
        color=np.where(mask, g_color, 0.0),
        opacity=np.where(valid, g_opacity, 0.0),
        mean2d=g_mean,
    )


def render_backward(S: GaussianSplat, cam: Camera, bg, grad_image, cfg: RenderConfig = DEFAULT_CONFIG) -> SplatGrads:
    _, ctx = rasterize(S.mu, S.scale, S.rot, S.color, S.opacity, cam, bg, cfg)
    return rasterize_backward(ctx, grad_image)


def render_tensor(mu: Tensor, scale: Tensor, rot: Tensor, color: Tensor, opacity: Tensor, cam: Camera,
                  bg=(0.0, 0.0, 0.0), cfg: RenderConfig = DEFAULT_CONFIG) -> Tensor:
    """Render as a graph node; ``opacity`` may be (N,) or (N,1). Output (H, W, 3)."""
    dtype = mu.data.dtype
    image, ctx = rasterize(mu.data, scale.data, rot.data, color.data, opacity.data, cam, bg, cfg)
    op_shape = opacity.shape

    def bw(g):
        gr = rasterize_backward(ctx, g)
        return (gr.mu.astype(dtype), gr.scale.astype(dtype), gr.rot.astype(dtype),
                gr.color.astype(dtype), gr.opacity.reshape(op_shape).astype(dtype))

    return custom_op((mu, scale, rot, color, opacity), image.astype(dtype), bw, "render")
