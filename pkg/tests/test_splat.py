import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from gsn.errors import FormatError, InvalidArgumentError, VersionError
from gsn.splat import (
    SPLAT_HEADER_SIZE,
    Camera,
    GaussianPrimitive,
    GaussianSplat,
    SO2Rotation,
    apply_deltas,
    covariance_from,
    make_canonical_cube,
    principal_axis_rotation,
    quat_multiply,
    quat_to_rotmat,
    rotate_splat_about_principal_axis,
    splat_from_bytes,
    splat_read,
    splat_write,
)


def random_splat(n, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    return GaussianSplat(rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.01, 0.2, (n, 3)),
                         q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(0, 1, (n, 3)),
                         rng.uniform(0, 1, n))


unit_quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: np.array(v) / np.linalg.norm(v))


class TestQuaternions:
    def test_identity(self):
        np.testing.assert_array_equal(quat_to_rotmat([1.0, 0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z_matches_matrix_exponential(self):
        s = math.sqrt(0.5)
        M = quat_to_rotmat([s, 0, 0, s])
        K = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]]) * (math.pi / 2)
        np.testing.assert_allclose(M, expm(K), atol=1e-12)
        np.testing.assert_allclose(M @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_against_scipy(self):
        q = random_splat(20, 3).rot
        ref = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
        np.testing.assert_allclose(quat_to_rotmat(q), ref, atol=1e-12)

    @given(unit_quats)
    @settings(max_examples=200, deadline=None)
    def test_orthonormal_and_double_cover(self, q):
        M = quat_to_rotmat(q)
        np.testing.assert_allclose(M.T @ M, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(M) - 1) < 1e-12
        np.testing.assert_allclose(quat_to_rotmat(-q), M, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            quat_to_rotmat([np.nan, 0, 0, 1])

    def test_multiply_composes_rotations(self):
        a, b = random_splat(2, 5).rot
        np.testing.assert_allclose(quat_to_rotmat(quat_multiply(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b),
                                   atol=1e-12)


class TestCovariance:
    def test_isotropic(self):
        q = random_splat(1, 1).rot[0]
        np.testing.assert_allclose(covariance_from([0.3] * 3, q), 0.09 * np.eye(3), atol=1e-14)

    def test_axis_aligned(self):
        np.testing.assert_allclose(covariance_from([1, 2, 3], [1, 0, 0, 0]), np.diag([1, 4, 9]))

    def test_eigenvalues_are_squared_scales(self):
        S = random_splat(50, 2)
        for s, q in zip(S.scale, S.rot):
            ev = np.linalg.eigvalsh(covariance_from(s, q))
            np.testing.assert_allclose(np.sort(ev), np.sort(s**2), rtol=1e-9, atol=1e-15)

    def test_spd_for_many_inputs(self):
        S = random_splat(10_000, 4)
        cov = covariance_from(S.scale, S.rot)
        np.linalg.cholesky(cov)  # raises if any is not SPD
        np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-15)

    @pytest.mark.parametrize("bad", [[0, 1, 1], [-1, 1, 1]])
    def test_non_positive_scale(self, bad):
        with pytest.raises(InvalidArgumentError):
            covariance_from(bad, [1, 0, 0, 0])


class TestSplatInvariants:
    def test_valid(self):
        assert len(random_splat(5)) == 5

    @pytest.mark.parametrize("field,value", [
        ("scale", np.array([[0.0, 0.1, 0.1]])),
        ("rot", np.array([[1.0, 0.1, 0, 0]])),
        ("color", np.array([[1.2, 0, 0]])),
        ("opacity", np.array([-0.1])),
    ])
    def test_rejects_invalid(self, field, value):
        S = random_splat(1)
        kw = dict(mu=S.mu, scale=S.scale, rot=S.rot, color=S.color, opacity=S.opacity)
        kw[field] = value
        with pytest.raises(InvalidArgumentError):
            GaussianSplat(**kw)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            GaussianSplat(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    def test_primitive_round_trip(self):
        S = random_splat(4)
        T = GaussianSplat.from_primitives([S[i] for i in range(4)])
        np.testing.assert_array_equal(T.to_records(), S.to_records())
        assert isinstance(S[0], GaussianPrimitive)


class TestCanonicalCube:
    def test_corners(self):
        cube = make_canonical_cube(2, 1.0)
        assert len(cube) == 8
        assert {tuple(p) for p in cube.base_mu} == {(x, y, z) for x in (-.5, .5) for y in (-.5, .5) for z in (-.5, .5)}

    def test_base_scale(self):
        cube = make_canonical_cube(4)
        np.testing.assert_allclose(cube.base_scale, math.sqrt(0.0075))
        assert abs(cube.base_scale[0, 0] - 0.08660) < 1e-5

    def test_lattice_spacing_n16(self):
        cube = make_canonical_cube(16)
        assert len(cube) == 4096
        p = cube.base_mu
        d2 = np.sum(p**2, 1)[:, None] + np.sum(p**2, 1)[None] - 2 * p @ p.T
        np.fill_diagonal(d2, np.inf)
        np.testing.assert_allclose(np.sqrt(np.maximum(d2.min(1), 0)), 1 / 15, rtol=1e-9)

    def test_zero_centered(self):
        cube = make_canonical_cube(5)
        assert np.abs(cube.base_mu.mean(0)).max() < 1e-9
        assert cube.base_mu.min() >= -0.5 and cube.base_mu.max() <= 0.5

    def test_off_centered(self):
        cube = make_canonical_cube(3, centering="off", center=(0.3, 0, 0))
        np.testing.assert_allclose(cube.base_mu.mean(0), [0.3, 0, 0], atol=1e-12)

    @pytest.mark.parametrize("kw", [dict(lattice_n=1), dict(lattice_n=4, base_cov=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            make_canonical_cube(**kw)


class TestApplyDeltas:
    def _heads(self, cube, rng):
        n = len(cube)
        q = rng.normal(size=(n, 4))
        return (rng.uniform(0.01, 0.1, (n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                rng.uniform(0, 1, (n, 3)), rng.uniform(0, 1, n))

    def test_shift(self):
        cube = make_canonical_cube(3)
        s, r, c, a = self._heads(cube, np.random.default_rng(0))
        d = np.tile([0.1, 0, 0], (len(cube), 1))
        S = apply_deltas(cube, d, s, r, c, a)
        np.testing.assert_allclose(S.mu - cube.base_mu, d, atol=1e-15)

    def test_round_trip(self):
        cube = make_canonical_cube(3)
        rng = np.random.default_rng(1)
        d = rng.normal(size=(len(cube), 3))
        S = apply_deltas(cube, d, *self._heads(cube, rng))
        np.testing.assert_allclose(S.mu - cube.base_mu, d, atol=1e-9)

    def test_length_mismatch(self):
        cube = make_canonical_cube(2)
        s, r, c, a = self._heads(cube, np.random.default_rng(0))
        with pytest.raises(InvalidArgumentError):
            apply_deltas(cube, np.zeros((7, 3)), s, r, c, a)


class TestCamera:
    def test_look_at_is_valid_and_aims_at_target(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.normal(size=3) * 2
            cam = Camera.look_at(p)
            np.testing.assert_allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)
            t = cam.world_to_camera(np.zeros((1, 3)))[0]
            np.testing.assert_allclose(t[:2], 0, atol=1e-9)
            assert t[2] > 0

    def test_rejects_non_rotation(self):
        cam = Camera.look_at([0, 0, -2.0])
        with pytest.raises(InvalidArgumentError):
            Camera(cam.position, 2 * cam.R, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
        with pytest.raises(InvalidArgumentError):
            Camera(cam.position, cam.R, -1.0, cam.fy, cam.cx, cam.cy, cam.width, cam.height)

    def test_dict_round_trip(self):
        cam = Camera.look_at([1.0, 0.5, 0.3], width=40, height=30)
        assert Camera.from_dict(cam.to_dict()).to_dict() == cam.to_dict()


class TestSO2:
    def test_composition(self):
        a, b = SO2Rotation(5.0), SO2Rotation(4.0)
        assert abs(a.compose(b).angle - (9.0 % (2 * math.pi))) < 1e-12
        assert abs(a.compose(a.inverse()).angle % (2 * math.pi)) < 1e-12 or abs(
            a.compose(a.inverse()).angle - 2 * math.pi) < 1e-12

    def test_quarter_turns(self):
        assert SO2Rotation.from_degrees(270).quarter_turns == 3
        assert SO2Rotation.from_degrees(-90).quarter_turns == 3
        assert SO2Rotation(0.3).quarter_turns is None


class TestPrincipalAxisRotation:
    def test_identity(self):
        S = random_splat(10)
        cam = Camera.look_at([0.3, -1.2, 0.8])
        T = rotate_splat_about_principal_axis(S, cam, 0.0)
        np.testing.assert_allclose(T.mu, S.mu, atol=1e-12)
        np.testing.assert_allclose(T.rot, S.rot, atol=1e-12)

    def test_inverse(self):
        S = random_splat(10)
        cam = Camera.look_at([0.3, -1.2, 0.8])
        T = rotate_splat_about_principal_axis(rotate_splat_about_principal_axis(S, cam, 1.1), cam, -1.1)
        np.testing.assert_allclose(T.mu, S.mu, atol=1e-9)
        np.testing.assert_allclose(T.rot, S.rot, atol=1e-9)

    def test_quarter_turn_about_z_axis(self):
        cam = Camera.look_at([0, 0, 2.0], up=(0, 1, 0))
        S = GaussianSplat(np.array([[0.2, 0, 0]]), np.full((1, 3), 0.1), np.array([[1.0, 0, 0, 0]]),
                          np.full((1, 3), 0.5), np.array([0.5]))
        T = rotate_splat_about_principal_axis(S, cam, SO2Rotation.from_degrees(90))
        assert abs(T.mu[0, 0]) < 1e-12 and abs(T.mu[0, 2]) < 1e-12
        assert abs(abs(T.mu[0, 1]) - 0.2) < 1e-12

    def test_isometry_and_untouched_attributes(self):
        S = random_splat(30)
        cam = Camera.look_at([1.0, 2.0, -0.5])
        T = rotate_splat_about_principal_axis(S, cam, 2.3)
        d = lambda p: np.linalg.norm(p[:, None] - p[None], axis=-1)  # noqa: E731
        np.testing.assert_allclose(d(T.mu), d(S.mu), atol=1e-9)
        np.testing.assert_array_equal(T.scale, S.scale)
        np.testing.assert_array_equal(T.color, S.color)
        np.testing.assert_array_equal(T.opacity, S.opacity)

    def test_axis_points_fixed(self):
        cam = Camera.look_at([1.0, 2.0, -0.5])
        A, _ = principal_axis_rotation(cam, 0.7)
        np.testing.assert_allclose(A @ cam.principal_axis, cam.principal_axis, atol=1e-12)

    def test_orientations_follow_positions(self):
        S = random_splat(5)
        cam = Camera.look_at([1.0, 2.0, -0.5])
        A, _ = principal_axis_rotation(cam, 0.7)
        T = rotate_splat_about_principal_axis(S, cam, 0.7)
        np.testing.assert_allclose(T.covariances, A @ S.covariances @ A.T, atol=1e-12)


class TestSplatFile:
    def test_round_trip(self, tmp_path):
        S = random_splat(17)
        splat_write(S, tmp_path / "a.gspl")
        T = splat_read(tmp_path / "a.gspl")
        np.testing.assert_array_equal(T.to_records(), S.to_records().astype(np.float32))

    def test_single_record_size(self, tmp_path):
        splat_write(random_splat(1), tmp_path / "one.gspl")
        assert (tmp_path / "one.gspl").stat().st_size == SPLAT_HEADER_SIZE + 56 == 12 + 56

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.gspl").write_bytes(b"")
        with pytest.raises(FormatError, match="offset 0"):
            splat_read(tmp_path / "e.gspl")

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="offset 0"):
            splat_from_bytes(b"XXXX" + struct.pack("<II", 1, 1) + bytes(56))

    def test_bad_version(self):
        with pytest.raises(VersionError, match="offset 4"):
            splat_from_bytes(b"GSPL" + struct.pack("<II", 2, 1) + bytes(56))

    def test_truncated(self, tmp_path):
        splat_write(random_splat(3), tmp_path / "t.gspl")
        buf = (tmp_path / "t.gspl").read_bytes()[:-5]
        with pytest.raises(FormatError, match="offset"):
            splat_from_bytes(buf)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            splat_read(tmp_path / "nope.gspl")
