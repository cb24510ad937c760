"""Evaluation measures: PSNR, SSIM, equivariance ECD and throughput."""

from __future__ import annotations

import csv
import math
import os
import platform
import time
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from . import losses
from ._accel import backend_name
from .errors import InvalidArgumentError, ShapeError
from .data import rotate_image
from .splat import SO2Rotation, rotate_splat_about_principal_axis

PSNR_CAP = 99.0
DEFAULT_ANGLES_DEG = (90.0, 180.0, 270.0)


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 99 dB."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_metric(a, b) -> float:
    return 1.0 - 2.0 * float(losses.dssim_loss(_arr(a), _arr(b)).data)


def equivariance_ecd(model, inputs: Sequence[np.ndarray], cam, angles_deg: Sequence[float] = DEFAULT_ANGLES_DEG,
                     bg=(1.0, 1.0, 1.0), double_cover: bool = True) -> float:
    """Mean over inputs and angles of ECD(T(F(I)), F(T(I))) with unit weights.

    ``cam`` is the input camera, whose principal axis defines T. Rotations
    are compared modulo quaternion sign by default: q and -q are the same
    orientation, and T composed over a full turn flips the sign.
    """
    if len(inputs) == 0:
        raise InvalidArgumentError("equivariance_ecd needs at least one input image")
    w = losses.LossWeights(double_cover_rot=double_cover)
    vals = []
    for img in inputs:
        base = model.forward(img)
        for deg in angles_deg:
            th = SO2Rotation.from_degrees(deg)
            lhs = rotate_splat_about_principal_axis(base, cam, th)
            rhs = model.forward(rotate_image(img, th, bg))
            vals.append(losses.ecd_value(lhs, rhs, w))
    # sorted fsum: exactly independent of input order
    return float(math.fsum(sorted(vals)) / len(vals))


# ---------------------------------------------------------------------------
# throughput


def environment_descriptor(threads: int | None = None) -> dict:
    try:
        import numba

        nthreads = threads or numba.get_num_threads()
    except ImportError:
        nthreads = threads or 1
    return {
        "backend": backend_name(),
        "threads": int(nthreads),
        "cpu": platform.processor() or platform.machine(),
        "cpus_visible": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


@dataclass
class BenchResult:
    decoder_ms: float
    render_ms: float
    decoder_fps: float
    render_fps: float
    n_gaussians: int
    iters: int
    precision: str
    environment: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        env = ", ".join(f"{k}={v}" for k, v in self.environment.items())
        return [
            f"N={self.n_gaussians} precision={self.precision} iters={self.iters}",
            f"forward (encode+decode+heads): {self.decoder_ms:.2f} ms median, {self.decoder_fps:.1f} FPS",
            f"render: {self.render_ms:.2f} ms median, {self.render_fps:.1f} FPS",
            f"environment: {env}",
        ]


def _median_ms(fn, iters: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


def bench_fps(model, image, iters: int = 20, warmup: int = 3, cam=None, bg=(1.0, 1.0, 1.0)) -> BenchResult:
    """Median wall-clock of model.forward(image), with render time reported separately."""
    from .data import input_camera
    from .render import render

    if iters < 10:
        raise InvalidArgumentError(f"bench_fps needs iters >= 10, got {iters}")
    cam = cam or input_camera(resolution=image.shape[0])
    dec = _median_ms(lambda: model.forward(image), iters, warmup)
    S = model.forward(image)
    ren = _median_ms(lambda: render(S, cam, bg), iters, warmup)
    return BenchResult(dec, ren, 1000.0 / dec, 1000.0 / ren, model.n_gaussians, iters,
                       np.dtype(model.dtype).name, environment_descriptor())


def decoder_time(model, iters: int = 20, warmup: int = 3, seed: int = 0) -> float:
    """Median ms of decode + heads from a fixed random latent (encoder excluded)."""
    from .model import LATENT_DIM, activate
    from .autodiff import Tensor

    z = Tensor(np.random.default_rng(seed).normal(size=(1, LATENT_DIM)).astype(model.dtype))
    return _median_ms(lambda: activate(model.decode(z), model.cube, model.cfg.eps_scale), iters, warmup)


def decoder_time_for_n(n: int, hidden: int = 512, iters: int = 20, warmup: int = 3, seed: int = 0,
                       dtype=np.float32) -> float:
    """Median ms of the five decoder MLPs plus heads for an arbitrary Gaussian count n.

    Decoder cost does not depend on the lattice, so n need not be a cube.
    """
    from types import SimpleNamespace

    from .autodiff import Tensor
    from .model import HEADS, LATENT_DIM, activate, decode

    rng = np.random.default_rng(seed)
    params = {}
    for head, d in HEADS:
        params[f"dec.{head}.fc1.w"] = Tensor(rng.uniform(-0.03, 0.03, (LATENT_DIM, hidden)).astype(dtype))
        params[f"dec.{head}.fc1.b"] = Tensor(np.zeros(hidden, dtype))
        params[f"dec.{head}.fc2.w"] = Tensor(rng.uniform(-0.1, 0.1, (hidden, n * d)).astype(dtype))
        params[f"dec.{head}.fc2.b"] = Tensor(np.zeros(n * d, dtype))
    cfg = SimpleNamespace(n_gaussians=n)
    cube = SimpleNamespace(base_mu=np.zeros((n, 3)), base_scale=np.full((n, 3), 0.05))
    z = Tensor(rng.normal(size=(1, LATENT_DIM)).astype(dtype))
    return _median_ms(lambda: activate(decode(params, z, cfg), cube, 1e-4), iters, warmup)


def n_sweep(ns: Sequence[int] = (512, 1024, 2048, 4096), hidden: int = 512, iters: int = 20,
            warmup: int = 3) -> list[tuple[int, float]]:
    return [(int(n), decoder_time_for_n(int(n), hidden, iters, warmup)) for n in ns]


def loglog_slope(points: Sequence[tuple[int, float]]) -> float:
    x = np.log([p[0] for p in points])
    y = np.log([p[1] for p in points])
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# reports


METRIC_NAMES = ("psnr", "ssim", "ecd")
CSV_COLUMNS = {"psnr": "psnr_db", "ssim": "ssim", "ecd": "ecd_equivariance"}


def parse_metric_names(spec: str) -> tuple[str, ...]:
    names = tuple(n.strip() for n in spec.split(",") if n.strip())
    bad = [n for n in names if n not in METRIC_NAMES]
    if bad or not names:
        raise InvalidArgumentError(f"unknown metric(s) {bad or [spec]}; valid names: {', '.join(METRIC_NAMES)}")
    return names


@dataclass
class ObjectScores:
    name: str
    values: dict[str, float]


@dataclass
class EvalReport:
    metrics: tuple[str, ...]
    objects: list[ObjectScores]
    environment: dict = field(default_factory=dict)

    def aggregate(self) -> ObjectScores:
        if not self.objects:
            raise InvalidArgumentError("empty evaluation report")
        n = len(self.objects)
        return ObjectScores("mean", {m: math.fsum(o.values[m] for o in self.objects) / n for m in self.metrics})

    def write_csv(self, path: str | PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["object", *(CSV_COLUMNS[m] for m in self.metrics)])
            for o in [*self.objects, self.aggregate()]:
                wr.writerow([o.name, *(repr(float(o.values[m])) for m in self.metrics)])

    def summary(self) -> str:
        fmt = {"psnr": "PSNR {:.2f} dB", "ssim": "SSIM {:.4f}", "ecd": "ECD {:.5f}"}
        lines = [f"{o.name}: " + "  ".join(fmt[m].format(o.values[m]) for m in self.metrics)
                 for o in [*self.objects, self.aggregate()]]
        if self.environment:
            lines.append("environment: " + ", ".join(f"{k}={v}" for k, v in self.environment.items()))
        return "\n".join(lines)


def evaluate(model, dataset, metrics: Sequence[str] = METRIC_NAMES, views: Sequence[int] | None = None,
             angles_deg=DEFAULT_ANGLES_DEG) -> EvalReport:
    """Scores F(view 0) per object: PSNR/SSIM of renders at ``views`` (default: all others), equivariance ECD."""
    from .render import render

    if len(dataset.objects) == 0:
        raise InvalidArgumentError("dataset has no objects")
    for obj in dataset.objects:
        if obj.images[0].shape[:2] != (obj.cameras[0].height, obj.cameras[0].width):
            raise ShapeError("image and camera sizes disagree")
    bg = dataset.bg
    rows = []
    for i, obj in enumerate(dataset.objects):
        img = obj.images[0]
        vals: dict[str, float] = {}
        if "psnr" in metrics or "ssim" in metrics:
            S = model.forward(img)
            idx = list(views) if views is not None else list(range(1, len(obj.images)))
            preds = [render(S, obj.cameras[j], bg) for j in idx]
            if "psnr" in metrics:
                vals["psnr"] = float(np.mean([psnr(p, obj.images[j]) for p, j in zip(preds, idx)]))
            if "ssim" in metrics:
                vals["ssim"] = float(np.mean([ssim_metric(p, obj.images[j]) for p, j in zip(preds, idx)]))
        if "ecd" in metrics:
            vals["ecd"] = equivariance_ecd(model, [img], obj.cameras[0], angles_deg, bg)
        rows.append(ObjectScores(f"obj_{i:04d}", vals))
    return EvalReport(tuple(m for m in METRIC_NAMES if m in metrics), rows, environment_descriptor())
