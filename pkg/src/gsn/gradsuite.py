"""Float64 finite-difference suites for the renderer, the losses and the full model.

Scenes are chosen away from culling and tile-boundary discontinuities so that
central differences with h = 1e-5 are meaningful.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import GradcheckReport, Tensor, gradcheck
from .render import render_tensor
from .splat import Camera

MODULES = ("renderer", "losses", "model")


def _probe_camera(size: int) -> Camera:
    return Camera.look_at(np.array([0.0, 0.0, -3.0]), width=size, height=size, fov_deg=40.0)


def _leaf(a, name: str) -> Tensor:
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True, name=name)


def renderer_scene(seed: int = 0, n: int = 3, size: int = 8):
    """n overlapping Gaussians near the view center with a random readout."""
    rng = np.random.default_rng(seed)
    mu = _leaf(rng.uniform(-0.25, 0.25, (n, 3)), "mu")
    scale = _leaf(rng.uniform(0.15, 0.3, (n, 3)), "scale")
    q = rng.normal(size=(n, 4))
    rot = _leaf(q / np.linalg.norm(q, axis=1, keepdims=True), "rot")
    color = _leaf(rng.uniform(0.1, 0.9, (n, 3)), "color")
    opacity = _leaf(rng.uniform(0.3, 0.8, n), "opacity")
    readout = rng.normal(size=(size, size, 3))
    return [mu, scale, rot, color, opacity], _probe_camera(size), readout


def check_renderer(seed: int = 0, n: int = 3, size: int = 8, bg=(0.2, 0.3, 0.4), tol: float = 1e-3) -> GradcheckReport:
    params, cam, readout = renderer_scene(seed, n, size)

    def f():
        img = render_tensor(*params, cam, bg)
        return ad.sum_(ad.mul(img, readout))

    return gradcheck(f, params, tol=tol)


def _splat_leaves(rng, n: int, prefix: str) -> losses.SplatTensors:
    q = rng.normal(size=(n, 4))
    return losses.SplatTensors(
        _leaf(rng.uniform(-1, 1, (n, 3)), prefix + "mu"),
        _leaf(rng.uniform(0.05, 0.2, (n, 3)), prefix + "scale"),
        _leaf(q / np.linalg.norm(q, axis=1, keepdims=True), prefix + "rot"),
        _leaf(rng.uniform(0, 1, (n, 3)), prefix + "color"),
        _leaf(rng.uniform(0, 1, (n, 1)), prefix + "opacity"),
    )


def check_ecd(seed: int = 0, n: int = 12, m: int = 9, tol: float = 1e-3) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    A = _splat_leaves(rng, n, "a.")
    B = _splat_leaves(rng, m, "b.")
    w = losses.LossWeights(w_color=0.7, w_scale=1.3, w_rot=0.9, w_opacity=1.1)
    return gradcheck(lambda: losses.ecd(A, B, w), [*A, *B], tol=tol)


def check_dssim(seed: int = 0, size: int = 14, tol: float = 1e-3) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    a = _leaf(rng.uniform(0, 1, (size, size, 3)), "a")
    b = _leaf(np.clip(a.data + rng.normal(scale=0.1, size=a.shape), 0, 1), "b")
    return gradcheck(lambda: losses.dssim_loss(a, b), [a, b], tol=tol, max_per_param=120)


def check_model(seed: int = 0, n_params: int = 50, size: int = 16, tol: float = 1e-3) -> GradcheckReport:
    """render(forward(I)) against a random target, over a random subset of parameter elements."""
    from .data import DEFAULT_RADIUS, input_camera
    from .model import GSNModel, ModelConfig

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(lattice_n=2, hidden=6, backbone=(3, 3, 4, 4, 4), compress_mid=4, seed=seed)
    model = GSNModel(cfg, dtype=np.float64)
    # the zero-initialized last layers would hide every upstream gradient
    for name, t in model.params.items():
        if ".fc2." in name:
            t.data[...] = rng.normal(scale=0.05, size=t.shape)
    image = rng.uniform(0, 1, (32, 32, 3))
    cam = input_camera(DEFAULT_RADIUS, size)
    target = rng.uniform(0, 1, (size, size, 3))

    def f():
        S = model.forward_batch(image[None])[0]
        img = render_tensor(S.mu, S.scale, S.rot, S.color, S.opacity, cam, (1.0, 1.0, 1.0))
        return losses.l2_loss(img, target)

    # spread the budget over tensors in proportion to size, at least one element each
    names = sorted(model.params)
    sizes = np.array([model.params[k].data.size for k in names], dtype=float)
    picks = rng.choice(len(names), size=n_params, p=sizes / sizes.sum())
    counts = np.bincount(picks, minlength=len(names))
    chosen = [(k, int(c)) for k, c in zip(names, counts) if c > 0]
    params = [model.params[k] for k, _ in chosen]
    return gradcheck(f, params, tol=tol, max_per_param=[c for _, c in chosen], rng=rng,
                     names=[k for k, _ in chosen])


def run_module(module: str, seed: int = 0) -> dict[str, GradcheckReport]:
    if module == "renderer":
        return {"renderer": check_renderer(seed)}
    if module == "losses":
        return {"ecd": check_ecd(seed), "dssim": check_dssim(seed)}
    if module == "model":
        return {"render(forward)": check_model(seed)}
    raise ValueError(f"unknown module {module!r}; valid: {', '.join(MODULES)}")
