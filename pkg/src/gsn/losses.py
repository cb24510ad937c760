"""Image reconstruction losses, Extended Chamfer Distance and the rotation loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from ._accel import USE_NUMBA
from .autodiff import Tensor
from .errors import ConfigError, InvalidArgumentError, ShapeError
from .splat import GaussianSplat

if USE_NUMBA:
    from . import _nn_numba

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    l2: float = 1.0
    dssim: float = 0.2
    lpips: float = 0.0
    rot: float = 0.1
    w_color: float = 1.0
    w_scale: float = 1.0
    w_rot: float = 1.0
    w_opacity: float = 1.0
    double_cover_rot: bool = False

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k == "double_cover_rot":
                continue
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {k} must be finite and >= 0, got {v}")


# ---------------------------------------------------------------------------
# perceptual plug-in point

_PERCEPTUAL: Callable[[Tensor, Tensor], Tensor] | None = None


def register_perceptual(fn: Callable[[Tensor, Tensor], Tensor] | None) -> None:
    """Install a differentiable image-pair functional used when lpips weight > 0."""
    global _PERCEPTUAL
    _PERCEPTUAL = fn


def check_loss_config(w: LossWeights) -> None:
    if w.lpips > 0 and _PERCEPTUAL is None:
        raise ConfigError("lpips weight > 0 but no perceptual loss is registered")


# ---------------------------------------------------------------------------
# image terms


def _check_pair(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: image shapes differ: {a.shape} vs {b.shape}")


def l2_loss(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    _check_pair(a, b, "l2_loss")
    return ad.mean(ad.square(ad.sub(a, b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes of (H, W, C)."""
    y = sliding_window_view(x, k.size, axis=0) @ k
    return sliding_window_view(y, k.size, axis=1) @ k


def _filter_valid_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    p = k.size - 1
    gp = np.pad(g, ((p, p), (p, p), (0, 0)))
    return _filter_valid(gp, k[::-1])


def _ssim_parts(a: np.ndarray, b: np.ndarray):
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidArgumentError(f"images of size {a.shape[:2]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = gaussian_window().astype(np.float64)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mx = _filter_valid(a, k)
    my = _filter_valid(b, k)
    exx = _filter_valid(a * a, k)
    eyy = _filter_valid(b * b, k)
    exy = _filter_valid(a * b, k)
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * (exy - mx * my) + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    return k, a, b, mx, my, A1, A2, B1, B2, smap


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows and channels."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: image shapes differ: {a.shape} vs {b.shape}")
    return float(_ssim_parts(a, b)[-1].mean())


def dssim_loss(a, b) -> Tensor:
    """(1 - SSIM(a, b)) / 2 as a differentiable node in both arguments."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    _check_pair(a, b, "dssim_loss")
    k, x, y, mx, my, A1, A2, B1, B2, smap = _ssim_parts(a.data, b.data)
    value = 0.5 * (1.0 - smap.mean())
    scale = -0.5 / smap.size

    def grad_wrt_first(x, y, mx, my):
        # d smap / d(mu_x, E[x^2], E[xy]) with sigma_x^2 = E[x^2] - mu_x^2, sigma_xy = E[xy] - mu_x mu_y
        g_mx = smap * (2 * my / A1 - 2 * mx / B1 - 2 * my / A2 + 2 * mx / B2)
        g_exx = smap * (-1.0 / B2)
        g_exy = smap * (2.0 / A2)
        g = (_filter_valid_adjoint(g_mx, k) + 2 * x * _filter_valid_adjoint(g_exx, k)
             + y * _filter_valid_adjoint(g_exy, k))
        return scale * g

    def bw(g):
        gs = float(g)
        ga = (gs * grad_wrt_first(x, y, mx, my)).reshape(a.shape).astype(a.dtype) if a.requires_grad else None
        gb = (gs * grad_wrt_first(y, x, my, mx)).reshape(b.shape).astype(b.dtype) if b.requires_grad else None
        return ga, gb

    return ad.custom_op((a, b), np.asarray(value, dtype=a.dtype), bw, "dssim")


def image_loss(rendered: Sequence, targets: Sequence, w: LossWeights) -> Tensor:
    """Mean over views of l2*L2 + dssim*DSSIM + lpips*perceptual."""
    if len(rendered) == 0:
        raise InvalidArgumentError("image_loss needs at least one view")
    if len(rendered) != len(targets):
        raise InvalidArgumentError(f"{len(rendered)} rendered views but {len(targets)} targets")
    check_loss_config(w)
    total = None
    for r, t in zip(rendered, targets):
        r = ad.as_tensor(r)
        t = ad.as_tensor(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=r.dtype))
        view = ad.scale(l2_loss(r, t), w.l2)
        if w.dssim:
            view = ad.add(view, ad.scale(dssim_loss(r, t), w.dssim))
        if w.lpips:
            view = ad.add(view, ad.scale(_PERCEPTUAL(r, t), w.lpips))
        total = view if total is None else ad.add(total, view)
    return ad.scale(total, 1.0 / len(rendered))


# ---------------------------------------------------------------------------
# nearest neighbours


class NNMatching(NamedTuple):
    a_to_b: np.ndarray
    b_to_a: np.ndarray
    d2_a: np.ndarray
    d2_b: np.ndarray


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def nearest_bruteforce(queries, points) -> tuple[np.ndarray, np.ndarray]:
    """O(N*M) oracle; argmin picks the smallest index among equal distances."""
    q = np.ascontiguousarray(queries, dtype=np.float64)
    p = np.ascontiguousarray(points, dtype=np.float64)
    idx = np.empty(q.shape[0], dtype=np.int64)
    d2 = np.empty(q.shape[0])
    chunk = max(1, 2_000_000 // max(p.shape[0], 1))
    for s in range(0, q.shape[0], chunk):
        d = _sq_dists(q[s:s + chunk], p)
        j = np.argmin(d, axis=1)
        idx[s:s + chunk] = j
        d2[s:s + chunk] = d[np.arange(j.size), j]
    return idx, d2


def nearest(queries, points) -> tuple[np.ndarray, np.ndarray]:
    q = np.ascontiguousarray(queries, dtype=np.float64)
    p = np.ascontiguousarray(points, dtype=np.float64)
    if q.shape[0] == 0 or p.shape[0] == 0:
        raise InvalidArgumentError("nearest neighbours need non-empty point sets")
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != 3 or p.shape[1] != 3:
        raise ShapeError(f"expected (n,3) point sets, got {q.shape} and {p.shape}")
    if USE_NUMBA:
        return _nn_numba.nearest(q, p)
    return nearest_bruteforce(q, p)


def nearest_neighbors(A, B) -> NNMatching:
    ia, da = nearest(A, B)
    ib, db = nearest(B, A)
    return NNMatching(ia, ib, da, db)


# ---------------------------------------------------------------------------
# Extended Chamfer Distance


class SplatTensors(NamedTuple):
    mu: Tensor
    scale: Tensor
    rot: Tensor
    color: Tensor
    opacity: Tensor

    @classmethod
    def from_splat(cls, S: GaussianSplat, requires_grad: bool = False, dtype=None) -> SplatTensors:
        def t(a):
            a = np.array(a, dtype=dtype or a.dtype)
            return Tensor(a, requires_grad=requires_grad)

        return cls(t(S.mu), t(S.scale), t(S.rot), t(S.color), t(S.opacity.reshape(-1, 1)))

    def to_splat(self) -> GaussianSplat:
        return GaussianSplat(self.mu.data, self.scale.data, self.rot.data, self.color.data,
                             self.opacity.data.reshape(-1))

    def __len__(self) -> int:
        return self.mu.shape[0]


def _as_splat_tensors(S) -> SplatTensors:
    if isinstance(S, SplatTensors):
        return S
    if isinstance(S, GaussianSplat):
        return SplatTensors.from_splat(S)
    raise InvalidArgumentError(f"expected a splat, got {type(S).__name__}")


def _one_side(X: SplatTensors, Y: SplatTensors, match: np.ndarray, w: LossWeights) -> Tensor:
    def term(x, y):
        return ad.sum_(ad.square(ad.sub(x, ad.take(y, match))), axis=1)

    d = term(X.mu, Y.mu)
    if w.w_color:
        d = ad.add(d, ad.scale(term(X.color, Y.color), w.w_color))
    if w.w_scale:
        d = ad.add(d, ad.scale(term(X.scale, Y.scale), w.w_scale))
    if w.w_rot:
        yr = ad.take(Y.rot, match)
        if w.double_cover_rot:
            minus = np.sum((X.rot.data - yr.data) ** 2, axis=1)
            plus = np.sum((X.rot.data + yr.data) ** 2, axis=1)
            sign = np.where(plus < minus, -1.0, 1.0).astype(X.rot.dtype)[:, None]
            yr = ad.mul(yr, sign)
        d = ad.add(d, ad.scale(ad.sum_(ad.square(ad.sub(X.rot, yr)), axis=1), w.w_rot))
    if w.w_opacity:
        d = ad.add(d, ad.scale(term(X.opacity.reshape(-1, 1) if X.opacity.ndim == 1 else X.opacity,
                                    Y.opacity.reshape(-1, 1) if Y.opacity.ndim == 1 else Y.opacity),
                               w.w_opacity))
    return ad.mean(d)


def ecd(Sa, Sb, w: LossWeights | None = None) -> Tensor:
    """Symmetric Extended Chamfer Distance; matchings are constants in backward."""
    w = w or LossWeights()
    A, B = _as_splat_tensors(Sa), _as_splat_tensors(Sb)
    if len(A) == 0 or len(B) == 0:
        raise InvalidArgumentError("ecd needs non-empty splats")
    m = nearest_neighbors(A.mu.data, B.mu.data)
    return ad.add(_one_side(A, B, m.a_to_b, w), _one_side(B, A, m.b_to_a, w))


def ecd_value(Sa, Sb, w: LossWeights | None = None) -> float:
    return float(ecd(Sa, Sb, w).data)


# ---------------------------------------------------------------------------
# rotation-equivariance loss


def rotation_loss(model, image, theta, cam, w: LossWeights | None = None, params=None,
                  bg=(1.0, 1.0, 1.0)) -> Tensor:
    """ECD between T(F(I)) and F(T(I)); gradients reach the model through both branches."""
    from .data import rotate_image
    from .splat import SO2Rotation

    w = w or LossWeights()
    theta = theta if isinstance(theta, SO2Rotation) else SO2Rotation(float(theta))
    image = np.asarray(image)
    rotated = rotate_image(image, theta, bg=bg)
    outs = model.forward_batch(np.stack([image, rotated]), params=params)
    s1 = model.rotate_splat_tensors(outs[0], cam, theta)
    return ecd(s1, outs[1], w)
