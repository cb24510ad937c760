"""Gaussian splat primitives, quaternion math, the canonical cube and splat files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError, ShapeError, VersionError

QUAT_TOL = 1e-6
SPLAT_MAGIC = b"GSPL"
SPLAT_VERSION = 1
_SPLAT_HEADER = struct.Struct("<4sII")
SPLAT_HEADER_SIZE = _SPLAT_HEADER.size
RECORD_FLOATS = 14


# ---------------------------------------------------------------------------
# quaternions


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix for (w, x, y, z) quaternions, shape (..., 4) -> (..., 3, 3).

    Uses the unit-quaternion formula without renormalizing, so the result is
    orthonormal only for unit input. ``q`` and ``-q`` give the same matrix.
    """
    q = np.asarray(q)
    if q.shape[-1] != 4:
        raise ShapeError(f"quaternion must have trailing dim 4, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("quaternion contains non-finite values")
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.result_type(q.dtype, np.float32))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_left_matrix(q) -> np.ndarray:
    """4x4 matrix L with ``L @ p == q * p`` (Hamilton product, w first)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [w, -x, -y, -z],
            [x, w, -z, y],
            [y, z, w, -x],
            [z, -y, x, w],
        ]
    )


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b for (..., 4) arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def covariance_from(scale, rot) -> np.ndarray:
    """Sigma = M diag(scale^2) M^T with M = quat_to_rotmat(rot); batched over leading dims."""
    scale = np.asarray(scale)
    if scale.shape[-1] != 3:
        raise ShapeError(f"scale must have trailing dim 3, got shape {scale.shape}")
    if not np.all(scale > 0):
        raise InvalidArgumentError("scale components must be strictly positive")
    m = quat_to_rotmat(rot)
    ms = m * (scale**2)[..., None, :]
    return ms @ np.swapaxes(m, -1, -2)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class GaussianPrimitive:
    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray
    opacity: float

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.scale, self.rot)


@dataclass(frozen=True, eq=False)
class GaussianSplat:
    """N Gaussians stored as parallel arrays.

    mu (N,3), scale (N,3) std-devs, rot (N,4) unit quaternions (w,x,y,z),
    color (N,3) RGB in [0,1], opacity (N,) in [0,1].
    """

    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    color: np.ndarray
    opacity: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("mu", "scale", "rot", "color", "opacity"):
            a = np.asarray(getattr(self, name))
            if a.dtype.kind != "f":
                a = a.astype(np.float64)
            arrays[name] = a
        op = arrays["opacity"]
        if op.ndim == 2 and op.shape[1] == 1:
            arrays["opacity"] = op = op[:, 0]
        n = arrays["mu"].shape[0] if arrays["mu"].ndim == 2 else -1
        expect = {"mu": (n, 3), "scale": (n, 3), "rot": (n, 4), "color": (n, 3), "opacity": (n,)}
        for name, shp in expect.items():
            if arrays[name].shape != shp:
                raise ShapeError(f"{name} has shape {arrays[name].shape}, expected {shp}")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)
        self.validate()

    def validate(self) -> None:
        if len(self) == 0:
            raise InvalidArgumentError("a splat needs at least one Gaussian")
        for name in ("mu", "scale", "rot", "color", "opacity"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidArgumentError(f"{name} contains non-finite values")
        if not np.all(self.scale > 0):
            raise InvalidArgumentError("scale components must be > 0")
        norms = np.linalg.norm(self.rot.astype(np.float64), axis=1)
        tol = QUAT_TOL if self.rot.dtype == np.float64 else 4e-6
        if np.any(np.abs(norms - 1.0) > tol):
            raise InvalidArgumentError(f"rotation quaternions must be unit (max dev {np.max(np.abs(norms - 1)):.3g})")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidArgumentError("color outside [0,1]")
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise InvalidArgumentError("opacity outside [0,1]")

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(self.mu[i], self.scale[i], self.rot[i], self.color[i], float(self.opacity[i]))

    @classmethod
    def from_primitives(cls, prims) -> GaussianSplat:
        prims = list(prims)
        return cls(
            mu=np.array([p.mu for p in prims], dtype=np.float64),
            scale=np.array([p.scale for p in prims], dtype=np.float64),
            rot=np.array([p.rot for p in prims], dtype=np.float64),
            color=np.array([p.color for p in prims], dtype=np.float64),
            opacity=np.array([p.opacity for p in prims], dtype=np.float64),
        )

    def astype(self, dtype) -> GaussianSplat:
        return GaussianSplat(*(getattr(self, k).astype(dtype) for k in ("mu", "scale", "rot", "color", "opacity")))

    def permuted(self, order) -> GaussianSplat:
        order = np.asarray(order)
        return GaussianSplat(self.mu[order], self.scale[order], self.rot[order], self.color[order], self.opacity[order])

    def to_records(self) -> np.ndarray:
        """(N, 14) array in file order: mu, scale, rot, color, opacity."""
        return np.concatenate([self.mu, self.scale, self.rot, self.color, self.opacity[:, None]], axis=1)

    @classmethod
    def from_records(cls, rec: np.ndarray) -> GaussianSplat:
        rec = np.asarray(rec)
        return cls(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10:13], rec[:, 13])

    @property
    def covariances(self) -> np.ndarray:
        return covariance_from(self.scale, self.rot)


@dataclass(frozen=True, eq=False)
class CanonicalCube:
    base_mu: np.ndarray
    base_scale: np.ndarray
    lattice_n: int
    centering: str = "zero"
    base_cov: float = 0.0075

    def __len__(self) -> int:
        return self.base_mu.shape[0]

    @property
    def n(self) -> int:
        return self.base_mu.shape[0]


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``R`` maps world to camera (x right, y down, z forward).

    Pixel (col u, row v) is sampled at coordinates (u, v); the default
    principal point is the image center ((W-1)/2, (H-1)/2).
    """

    position: np.ndarray
    R: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "R", R)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(R))):
            raise InvalidArgumentError("camera pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidArgumentError("camera rotation is not in SO(3)")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("image size must be positive")

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, width=128, height=128,
                fov_deg=60.0, fx=None, fy=None, cx=None, cy=None) -> Camera:
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        dist = np.linalg.norm(forward)
        if dist == 0:
            raise InvalidArgumentError("camera position coincides with target")
        forward /= dist
        up = np.asarray(up, dtype=np.float64)
        if np.linalg.norm(np.cross(forward, up)) < 1e-8:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        if fx is None:
            fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        if fy is None:
            fy = fx
        return cls(
            position=position,
            R=R,
            fx=float(fx),
            fy=float(fy),
            cx=float((width - 1) / 2 if cx is None else cx),
            cy=float((height - 1) / 2 if cy is None else cy),
            width=int(width),
            height=int(height),
        )

    @property
    def principal_axis(self) -> np.ndarray:
        """Viewing direction in world coordinates."""
        return self.R[2].copy()

    def world_to_camera(self, pts) -> np.ndarray:
        return (np.asarray(pts) - self.position) @ self.R.T

    def with_size(self, width: int, height: int) -> Camera:
        sx, sy = width / self.width, height / self.height
        return Camera(self.position, self.R, self.fx * sx, self.fy * sy,
                      (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, width, height)

    def to_dict(self) -> dict:
        return {
            "p": [float(v) for v in self.position],
            "R": [float(v) for v in self.R.reshape(-1)],
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "w": self.width, "h": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        return cls(np.array(d["p"], dtype=np.float64), np.array(d["R"], dtype=np.float64).reshape(3, 3),
                   float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["w"]), int(d["h"]))


@dataclass(frozen=True)
class SO2Rotation:
    """In-plane rotation about a camera's principal axis, angle kept in [0, 2pi)."""

    angle: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.angle):
            raise InvalidArgumentError("rotation angle must be finite")
        object.__setattr__(self, "angle", float(self.angle) % (2 * math.pi))

    @classmethod
    def from_degrees(cls, deg: float) -> SO2Rotation:
        return cls(math.radians(deg))

    def compose(self, other: SO2Rotation) -> SO2Rotation:
        """self then other."""
        return SO2Rotation(self.angle + other.angle)

    def inverse(self) -> SO2Rotation:
        return SO2Rotation(-self.angle)

    @property
    def quarter_turns(self) -> int | None:
        """k if the angle is k*90 degrees (to 1e-9 rad), else None."""
        k = self.angle / (math.pi / 2)
        r = round(k)
        if abs(k - r) * (math.pi / 2) < 1e-9:
            return r % 4
        return None


def _as_angle(theta) -> float:
    return theta.angle if isinstance(theta, SO2Rotation) else float(theta)


# ---------------------------------------------------------------------------
# operations


def make_canonical_cube(lattice_n: int = 16, extent: float = 1.0, base_cov: float = 0.0075,
                        centering: str = "zero", center=None) -> CanonicalCube:
    """Volumetric lattice_n^3 grid of isotropic Gaussians filling a cube.

    ``centering="zero"`` puts the cube center on the origin. ``"off"`` puts it
    at ``center`` (default: one unit down the +z axis, i.e. one unit in front
    of a camera sitting at the origin).
    """
    if int(lattice_n) != lattice_n or lattice_n < 2:
        raise InvalidArgumentError(f"lattice_n must be an integer >= 2, got {lattice_n}")
    if not base_cov > 0:
        raise InvalidArgumentError("base_cov must be positive")
    if not extent > 0:
        raise InvalidArgumentError("extent must be positive")
    if centering not in ("zero", "off"):
        raise InvalidArgumentError(f"centering must be 'zero' or 'off', got {centering!r}")
    n = int(lattice_n)
    ax = np.linspace(-0.5 * extent, 0.5 * extent, n)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    mu = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    if centering == "off":
        c = np.array([0.0, 0.0, 1.0]) if center is None else np.asarray(center, dtype=np.float64)
        mu = mu + c
    scale = np.full((n**3, 3), math.sqrt(base_cov))
    return CanonicalCube(base_mu=mu, base_scale=scale, lattice_n=n, centering=centering, base_cov=float(base_cov))


def apply_deltas(cube: CanonicalCube, delta_mu, delta_scale, rot, color, opacity) -> GaussianSplat:
    """Compose activated deviations with the cube: (mu+dmu, s+ds, r, c, alpha)."""
    delta_mu = np.asarray(delta_mu)
    delta_scale = np.asarray(delta_scale)
    n = len(cube)
    for name, a, d in (("delta_mu", delta_mu, 3), ("delta_scale", delta_scale, 3),
                       ("rot", np.asarray(rot), 4), ("color", np.asarray(color), 3)):
        if a.shape != (n, d):
            raise InvalidArgumentError(f"{name} has shape {a.shape}, cube needs ({n}, {d})")
    opacity = np.asarray(opacity).reshape(-1)
    if opacity.shape != (n,):
        raise InvalidArgumentError(f"opacity has {opacity.shape[0]} rows, cube needs {n}")
    return GaussianSplat(cube.base_mu + delta_mu, cube.base_scale + delta_scale, rot, color, opacity)


def principal_axis_rotation(cam: Camera, theta) -> tuple[np.ndarray, np.ndarray]:
    """World-frame rotation (matrix, quaternion) about the camera's viewing axis.

    In camera coordinates this is the plane rotation taking +x toward +y
    (x right, y down), so positive angles turn image content clockwise on
    screen, matching :func:`gsn.data.rotate_image`.
    """
    angle = _as_angle(theta)
    c, s = math.cos(angle), math.sin(angle)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    A = cam.R.T @ rz @ cam.R
    q = axis_angle_quat(cam.principal_axis, angle)
    return A, q


def rotate_splat_about_principal_axis(S: GaussianSplat, cam: Camera, theta) -> GaussianSplat:
    """Rotate every Gaussian about the line through the camera center along its view axis."""
    A, q = principal_axis_rotation(cam, theta)
    dtype = S.mu.dtype
    mu = (S.mu - cam.position) @ A.T + cam.position
    rot = S.rot @ quat_left_matrix(q).T
    return GaussianSplat(mu.astype(dtype), S.scale, rot.astype(dtype), S.color, S.opacity)


# ---------------------------------------------------------------------------
# splat files


def splat_write(S: GaussianSplat, path: str | PathLike) -> None:
    rec = S.to_records().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_SPLAT_HEADER.pack(SPLAT_MAGIC, SPLAT_VERSION, len(S)))
        fh.write(rec.tobytes())


def splat_from_bytes(buf: bytes, path=None) -> GaussianSplat:
    if len(buf) < SPLAT_HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} of {SPLAT_HEADER_SIZE} bytes", offset=len(buf), path=path)
    magic, version, count = _SPLAT_HEADER.unpack_from(buf, 0)
    if magic != SPLAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, path=path)
    if version != SPLAT_VERSION:
        raise VersionError(f"unsupported splat version {version}", offset=4, path=path)
    if count == 0:
        raise FormatError("splat has zero Gaussians", offset=8, path=path)
    need = SPLAT_HEADER_SIZE + count * RECORD_FLOATS * 4
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf)}", offset=len(buf), path=path)
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", offset=need, path=path)
    rec = np.frombuffer(buf, dtype="<f4", count=count * RECORD_FLOATS, offset=SPLAT_HEADER_SIZE)
    try:
        return GaussianSplat.from_records(rec.reshape(count, RECORD_FLOATS).astype(np.float32))
    except InvalidArgumentError as exc:
        raise FormatError(f"invalid splat contents: {exc}", offset=SPLAT_HEADER_SIZE, path=path) from exc


def splat_read(path: str | PathLike) -> GaussianSplat:
    return splat_from_bytes(Path(path).read_bytes(), path=path)
