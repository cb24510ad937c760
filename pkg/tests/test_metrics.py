import math

import numpy as np
import pytest

from gsn.data import build_dataset, input_camera, load_dataset
from gsn.errors import InvalidArgumentError
from gsn.losses import dssim_loss
from gsn.metrics import (
    EvalReport,
    ObjectScores,
    bench_fps,
    decoder_time_for_n,
    environment_descriptor,
    equivariance_ecd,
    evaluate,
    loglog_slope,
    parse_metric_names,
    psnr,
    ssim_metric,
)
from gsn.model import GSNModel, ModelConfig
from gsn.splat import GaussianSplat, principal_axis_rotation

TINY = ModelConfig(lattice_n=2, hidden=6, backbone=(3, 3, 4, 4, 4), compress_mid=4)


class EquivariantProbe:
    """Puts one Gaussian behind the brightest pixel, oriented by the pixel's polar angle."""

    n_gaussians = 1

    def __init__(self, cam):
        self.cam = cam

    def forward(self, img):
        v, u = np.unravel_index(np.argmax(img.sum(-1)), img.shape[:2])
        c = self.cam
        du, dv = u - c.cx, v - c.cy
        mu = c.position + c.R.T @ (np.array([du / c.fx, dv / c.fy, 1.0]) * 1.3)
        _, q = principal_axis_rotation(c, math.atan2(dv, du))
        return GaussianSplat(mu[None], np.array([[0.05, 0.1, 0.2]]), q[None], np.array([[0.2, 0.5, 0.9]]),
                             np.array([0.8]))


class TestImageMetrics:
    def test_psnr(self):
        a = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(a, a) == 99.0
        assert abs(psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) - 20.0) < 1e-9
        assert abs(psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3)))) < 1e-12

    def test_ssim(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(128, 128, 3)), rng.uniform(size=(128, 128, 3))
        assert abs(ssim_metric(a, a) - 1) < 1e-12
        assert abs(ssim_metric(a, b) - (1 - 2 * float(dssim_loss(a, b).data))) < 1e-12
        assert abs(ssim_metric(a, b)) < 0.1


class TestEquivariance:
    def test_equivariant_probe_scores_zero(self):
        cam = input_camera(resolution=33)
        img = np.zeros((33, 33, 3))
        img[5, 21] = 1.0
        assert equivariance_ecd(EquivariantProbe(cam), [img], cam, bg=(0, 0, 0)) < 1e-12

    def test_sign_sensitive_variant_is_upper_bound(self):
        cam = input_camera(resolution=33)
        img = np.zeros((33, 33, 3))
        img[5, 21] = 1.0
        probe = EquivariantProbe(cam)
        signed = equivariance_ecd(probe, [img], cam, bg=(0, 0, 0), double_cover=False)
        assert signed >= equivariance_ecd(probe, [img], cam, bg=(0, 0, 0))

    def test_deterministic(self):
        m = GSNModel(TINY)
        rng = np.random.default_rng(0)
        for t in m.params.values():
            t.data = t.data + rng.normal(scale=0.05, size=t.shape).astype(t.dtype)
        imgs = [np.random.default_rng(i).uniform(size=(32, 32, 3)) for i in range(2)]
        cam = input_camera(resolution=32)
        a = equivariance_ecd(m, imgs, cam)
        assert a > 0 and a == equivariance_ecd(m, imgs, cam)

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            equivariance_ecd(GSNModel(TINY), [], input_camera())


class TestThroughput:
    def test_bench_fps(self):
        res = bench_fps(GSNModel(TINY), np.zeros((32, 32, 3)), iters=10, warmup=1)
        assert res.decoder_fps > 0 and math.isfinite(res.decoder_fps)
        assert res.render_fps > 0 and math.isfinite(res.render_fps)
        text = "\n".join(res.lines())
        assert "forward" in text and "render" in text and "environment" in text

    def test_bench_needs_iters(self):
        with pytest.raises(InvalidArgumentError):
            bench_fps(GSNModel(TINY), np.zeros((32, 32, 3)), iters=3)

    def test_decoder_time_for_n(self):
        assert decoder_time_for_n(64, hidden=16, iters=3, warmup=1) > 0

    def test_loglog_slope(self):
        assert abs(loglog_slope([(n, 0.5 * n) for n in (512, 1024, 2048, 4096)]) - 1) < 1e-12
        assert abs(loglog_slope([(n, 3e-6 * n * n) for n in (10, 100)]) - 2) < 1e-12

    def test_environment(self):
        env = environment_descriptor()
        assert env["backend"] in ("numba", "numpy") and env["threads"] >= 1


class TestReports:
    def test_parse_names(self):
        assert parse_metric_names("psnr, ecd") == ("psnr", "ecd")
        with pytest.raises(InvalidArgumentError, match="psnr, ssim, ecd"):
            parse_metric_names("psnr,ssmi")

    def test_psnr_only_csv(self, tmp_path):
        rep = EvalReport(("psnr",), [ObjectScores("obj_0000", {"psnr": 21.5})])
        rep.write_csv(tmp_path / "a.csv")
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert "psnr" in header and "ssim" not in header

    def test_evaluate_deterministic_bytes(self, tmp_path):
        build_dataset(tmp_path / "ds", n_objects=2, k=3, resolution=24, seed=1, gaussians_per_part=8)
        ds = load_dataset(tmp_path / "ds")
        m = GSNModel(TINY)
        for name in ("a.csv", "b.csv"):
            evaluate(m, ds, ("psnr", "ssim", "ecd"), angles_deg=(90.0,)).write_csv(tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert len(rows) == 4 and rows[-1].startswith("mean")
