import json
import math

import numpy as np
import pytest
from scipy import ndimage

from gsn.data import (
    build_dataset,
    camera_at,
    generate_object,
    input_camera,
    load_dataset,
    load_image,
    read_manifest,
    resize_bilinear,
    rotate_image,
    sample_cameras,
    save_image,
    to_uint8,
    verify_dataset,
    SyntheticObjectSpec,
)
from gsn.errors import CameraError, FormatError, InvalidArgumentError, MissingFileError, VersionError
from gsn.losses import ecd_value
from gsn.render import render
from gsn.splat import SO2Rotation, rotate_splat_about_principal_axis


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    build_dataset(root, n_objects=2, k=3, resolution=24, seed=5, gaussians_per_part=10)
    return root


class TestImages:
    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(9, 7, 3))
        save_image(tmp_path / "a.png", img)
        back = load_image(tmp_path / "a.png")
        assert back.shape == (9, 7, 3)
        np.testing.assert_array_equal(to_uint8(back), to_uint8(img))
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_missing_image(self, tmp_path):
        with pytest.raises(MissingFileError, match="nope.png"):
            load_image(tmp_path / "nope.png")

    def test_resize_identity_and_constant(self):
        img = np.random.default_rng(1).uniform(size=(10, 10, 3))
        np.testing.assert_array_equal(resize_bilinear(img, 10, 10), img)
        np.testing.assert_allclose(resize_bilinear(np.full((5, 8, 3), 0.3), 13, 4), 0.3)

    def test_resize_matches_scipy_zoom_on_upsample_interior(self):
        img = np.random.default_rng(2).uniform(size=(6, 6, 1))
        out = resize_bilinear(img, 12, 12)
        # half-pixel centers: output pixel i samples input coordinate (i + 0.5) / 2 - 0.5
        coords = (np.arange(12) + 0.5) / 2 - 0.5
        ref = ndimage.map_coordinates(img[..., 0], np.meshgrid(coords, coords, indexing="ij"), order=1,
                                      mode="nearest")
        np.testing.assert_allclose(out[..., 0], ref, atol=1e-12)


class TestRotateImage:
    def test_zero_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        np.testing.assert_array_equal(rotate_image(img, 0.0), img)

    def test_four_quarter_turns(self):
        img = np.random.default_rng(1).uniform(size=(9, 9, 3))
        out = img
        for _ in range(4):
            out = rotate_image(out, math.pi / 2)
        np.testing.assert_array_equal(out, img)

    def test_half_turn_index_map(self):
        W = 11
        img = np.zeros((W, W, 3))
        img[2, 7] = 1.0  # row y=2, column x=7
        out = rotate_image(img, math.pi)
        assert out[W - 1 - 2, W - 1 - 7, 0] == 1.0 and out.sum() == 3.0

    def test_quarter_turn_is_clockwise(self):
        img = np.zeros((5, 5, 3))
        img[0, 2] = 1.0  # top middle
        out = rotate_image(img, math.pi / 2)
        assert out[2, 4, 0] == 1.0  # right middle

    def test_continuous_close_to_quarter_turn(self):
        img = ndimage.gaussian_filter(np.random.default_rng(3).uniform(size=(32, 32, 3)), (3, 3, 0))
        a = rotate_image(img, math.radians(89.999))
        b = rotate_image(img, math.pi / 2)
        assert np.abs(a - b)[4:-4, 4:-4].max() < 1e-3

    def test_non_square(self):
        img = np.zeros((6, 8, 3))
        assert rotate_image(img, math.pi).shape == (6, 8, 3)
        with pytest.raises(InvalidArgumentError):
            rotate_image(img, math.pi / 2)
        with pytest.raises(InvalidArgumentError):
            rotate_image(img, 0.3)

    @pytest.mark.parametrize("deg", [90, 180, 270])
    def test_commutes_with_splat_rotation(self, deg):
        S = generate_object(SyntheticObjectSpec(seed=deg, gaussians_per_part=15))
        cam = input_camera(resolution=33)
        th = SO2Rotation.from_degrees(deg)
        lhs = rotate_image(render(S, cam, (1, 1, 1)), th)
        rhs = render(rotate_splat_about_principal_axis(S, cam, th), cam, (1, 1, 1))
        assert np.abs(lhs - rhs).max() < 1e-5


class TestObjects:
    def test_same_seed_same_splat(self):
        a = generate_object(SyntheticObjectSpec(seed=4))
        b = generate_object(SyntheticObjectSpec(seed=4))
        np.testing.assert_array_equal(a.mu, b.mu)
        np.testing.assert_array_equal(a.color, b.color)

    def test_within_bound(self):
        for seed in range(10):
            S = generate_object(SyntheticObjectSpec(seed=seed))
            assert np.abs(S.mu).max() <= 0.4

    def test_different_seeds_differ(self):
        a = generate_object(SyntheticObjectSpec(seed=1))
        b = generate_object(SyntheticObjectSpec(seed=2))
        assert ecd_value(a, b) > 0

    def test_palette(self):
        S = generate_object(SyntheticObjectSpec(seed=3, parts=(2, 2), palette=((1.0, 0.0, 0.0),)))
        assert S.color[:, 0].mean() > 0.9 and S.color[:, 1:].mean() < 0.1


class TestCameras:
    @pytest.mark.parametrize("mode", ["uniform-sphere", "ring"])
    def test_rays_hit_origin_and_rotations_orthonormal(self, mode):
        for cam in sample_cameras(12, 1.5, seed=3, mode=mode, elevation=0.4):
            d = cam.principal_axis
            p = cam.position
            closest = p - np.dot(p, d) * d
            assert np.linalg.norm(closest) < 1e-9
            np.testing.assert_allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(cam.R) - 1) < 1e-12

    def test_ring_azimuths(self):
        cams = sample_cameras(4, mode="ring")
        az = sorted(round(math.degrees(math.atan2(c.position[1], c.position[0])) % 360, 6) for c in cams)
        assert az == [0, 90, 180, 270]

    def test_radius_too_small(self):
        with pytest.raises(InvalidArgumentError):
            sample_cameras(4, radius=0.8)

    def test_too_few(self):
        with pytest.raises(InvalidArgumentError):
            sample_cameras(1)

    def test_input_camera_first(self):
        cams = sample_cameras(3, include_input=True)
        np.testing.assert_allclose(cams[0].position, input_camera().position)

    def test_camera_at_position(self):
        cam = camera_at(math.pi / 2, 0.0, 2.0)
        np.testing.assert_allclose(cam.position, [0, 2, 0], atol=1e-12)


class TestDataset:
    def test_file_counts(self, tmp_path):
        build_dataset(tmp_path, n_objects=3, k=8, resolution=128, seed=0, gaussians_per_part=5)
        assert len(list(tmp_path.glob("obj_*/splat.gspl"))) == 3
        assert len(list(tmp_path.glob("obj_*/view_*.png"))) == 24
        assert len(list(tmp_path.glob("manifest.json"))) == 1

    def test_deterministic_bytes(self, small_ds, tmp_path):
        build_dataset(tmp_path, n_objects=2, k=3, resolution=24, seed=5, gaussians_per_part=10)
        for f in sorted(small_ds.rglob("*.*")):
            assert f.read_bytes() == (tmp_path / f.relative_to(small_ds)).read_bytes(), f.name

    def test_manifest_round_trip(self, small_ds):
        m = read_manifest(small_ds)
        d = json.loads((small_ds / "manifest.json").read_text())
        assert m.to_dict() == d
        assert (m.n_objects, m.k, m.resolution, m.seed) == (2, 3, 24, 5)

    def test_load_and_verify(self, small_ds):
        ds = load_dataset(small_ds)
        assert len(ds) == 2 and len(ds.objects[0].images) == 3
        assert verify_dataset(ds) <= 1 / 255

    def test_verify_detects_tampering(self, small_ds):
        ds = load_dataset(small_ds)
        ds.objects[1].images[2] = 1.0 - ds.objects[1].images[2]
        with pytest.raises(FormatError, match="object 1 view 2"):
            verify_dataset(ds)

    def test_missing_image_names_path(self, small_ds, tmp_path):
        import shutil

        root = tmp_path / "copy"
        shutil.copytree(small_ds, root)
        (root / "obj_0001" / "view_001.png").unlink()
        with pytest.raises(MissingFileError, match="view_001.png"):
            load_dataset(root)

    def test_version_error(self, small_ds, tmp_path):
        d = json.loads((small_ds / "manifest.json").read_text())
        d["version"] = 999
        (tmp_path / "manifest.json").write_text(json.dumps(d))
        with pytest.raises(VersionError):
            read_manifest(tmp_path)

    def test_bad_camera(self, small_ds, tmp_path):
        d = json.loads((small_ds / "manifest.json").read_text())
        d["objects"][0]["views"][1]["camera"]["R"] = [[2, 0, 0], [0, 1, 0], [0, 0, 1]]
        (tmp_path / "manifest.json").write_text(json.dumps(d))
        with pytest.raises(CameraError, match="object 0 view 1"):
            read_manifest(tmp_path)

    def test_missing_field(self, small_ds, tmp_path):
        d = json.loads((small_ds / "manifest.json").read_text())
        del d["k"]
        (tmp_path / "manifest.json").write_text(json.dumps(d))
        with pytest.raises(FormatError, match="'k'"):
            read_manifest(tmp_path)

    def test_no_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_manifest(tmp_path)
